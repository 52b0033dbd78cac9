use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeded stream with labeled children.
///
/// A child's stream depends only on the parent's key and the label, never on
/// how many values were drawn from the parent.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let key = splitmix64(seed);
        Rng {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    pub fn child(&self, label: &str) -> Rng {
        let key = splitmix64(self.key ^ splitmix64(fnv1a(label)));
        Rng {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal_vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * self.normal()).collect()
    }

    /// Gaussian vector rescaled to unit norm.
    pub fn unit_vec(&mut self, n: usize) -> Vec<f64> {
        loop {
            let v = self.normal_vec(n, 1.0);
            let norm = super::norm(&v);
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct values from `0..n`, sorted ascending.
    pub fn sample_sorted(&mut self, n: usize, amount: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.inner, n, amount).into_vec();
        picked.sort_unstable();
        picked
    }
}
