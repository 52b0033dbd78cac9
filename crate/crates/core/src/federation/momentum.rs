use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::beta_pdf;

/// Running Beta-weighted average over a fixed horizon of update slots.
///
/// Slot `i` gets weight `α_i = Beta(β,β)((i + 0.5)/(N + 1))`. After any number
/// of updates the average equals `Σ α_i V_i / Σ α_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumAverager {
    average: Vec<f64>,
    weight_sum: f64,
    horizon: usize,
    beta: f64,
    updates: usize,
}

impl MomentumAverager {
    pub fn new(len: usize, horizon: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::config("beta", format!("must be finite and > 0, got {beta}")));
        }
        Ok(MomentumAverager {
            average: vec![0.0; len],
            weight_sum: 0.0,
            horizon,
            beta,
            updates: 0,
        })
    }

    /// An averager whose slot 0 holds `init`.
    pub fn with_init(init: &[f64], horizon: usize, beta: f64) -> Result<Self> {
        let mut avg = Self::new(init.len(), horizon, beta)?;
        avg.update(init, 0)?;
        Ok(avg)
    }

    pub fn alpha(&self, slot: usize) -> Result<f64> {
        beta_pdf((slot as f64 + 0.5) / (self.horizon as f64 + 1.0), self.beta)
    }

    pub fn update(&mut self, value: &[f64], slot: usize) -> Result<()> {
        if slot > self.horizon {
            return Err(Error::Domain {
                op: "momentum_update",
                detail: format!("slot {slot} beyond horizon {}", self.horizon),
            });
        }
        if value.len() != self.average.len() {
            return Err(Error::shape("momentum_update", self.average.len(), value.len()));
        }
        let alpha = self.alpha(slot)?;
        let total = self.weight_sum + alpha;
        for (a, &v) in self.average.iter_mut().zip(value) {
            // an unchanged coordinate stays bit-identical
            if *a != v {
                *a = (self.weight_sum * *a + alpha * v) / total;
            }
        }
        if self.updates == 0 {
            self.average.copy_from_slice(value);
        }
        self.weight_sum = total;
        self.updates += 1;
        Ok(())
    }

    pub fn average(&self) -> &[f64] {
        &self.average
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight_sum
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn updates(&self) -> usize {
        self.updates
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn brute_force(inputs: &[Vec<f64>], horizon: usize, beta: f64) -> Vec<f64> {
        let alphas: Vec<f64> = (0..inputs.len())
            .map(|i| beta_pdf((i as f64 + 0.5) / (horizon as f64 + 1.0), beta).unwrap())
            .collect();
        let total: f64 = alphas.iter().sum();
        (0..inputs[0].len())
            .map(|k| inputs.iter().zip(&alphas).map(|(v, a)| a * v[k]).sum::<f64>() / total)
            .collect()
    }

    #[test]
    fn slot_zero_is_the_initialization() {
        let init = [0.3, -1.0, 2.5];
        let avg = MomentumAverager::with_init(&init, 10, 0.2).unwrap();
        assert_eq!(avg.average(), &init);
    }

    #[test]
    fn uniform_beta_gives_arithmetic_mean() {
        let mut rng = Rng::new(1);
        let inputs: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(4, 1.0)).collect();
        let mut avg = MomentumAverager::new(4, 5, 1.0).unwrap();
        for (i, v) in inputs.iter().enumerate() {
            avg.update(v, i).unwrap();
        }
        for k in 0..4 {
            let mean = inputs.iter().map(|v| v[k]).sum::<f64>() / 6.0;
            assert!((avg.average()[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_for_small_beta() {
        let mut rng = Rng::new(2);
        let inputs: Vec<Vec<f64>> = (0..11).map(|_| rng.normal_vec(5, 1.0)).collect();
        let mut avg = MomentumAverager::new(5, 10, 0.2).unwrap();
        for (i, v) in inputs.iter().enumerate() {
            avg.update(v, i).unwrap();
            let expect = brute_force(&inputs[..=i], 10, 0.2);
            for (a, b) in avg.average().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_inputs_stay_bit_identical() {
        let v = [0.1, 0.7, -0.3];
        let mut avg = MomentumAverager::with_init(&v, 50, 0.2).unwrap();
        for slot in 1..=50 {
            avg.update(&v, slot).unwrap();
        }
        assert_eq!(avg.average(), &v);
    }

    #[test]
    fn rejects_slots_beyond_horizon() {
        let mut avg = MomentumAverager::new(1, 3, 0.2).unwrap();
        assert!(avg.update(&[1.0], 3).is_ok());
        assert!(avg.update(&[1.0], 4).is_err());
        assert!(avg.update(&[1.0, 2.0], 1).is_err());
        assert!(MomentumAverager::new(1, 3, 0.0).is_err());
    }
}
