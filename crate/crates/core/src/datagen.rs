//! Synthetic multi-domain classification data and client partitioning.
//!
//! Sample `x` of class `j` in domain `m` is `u_j + γ·t_m + σ·ε` with unit-norm
//! class prototypes `u_j`, unit-norm domain shifts `t_m` and standard normal `ε`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    /// Latent domain. Only evaluation code and the domain-label ablation read it.
    pub domain: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub num_domains: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// γ
    pub shift_strength: f64,
    /// σ
    pub noise: f64,
    /// Samples per (domain, class) pair.
    pub samples_per_class: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            num_domains: 4,
            num_classes: 5,
            feature_dim: 16,
            shift_strength: 1.5,
            noise: 0.4,
            samples_per_class: 60,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("num_domains", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be at least 1"));
        }
        if !(self.shift_strength >= 0.0) || !self.shift_strength.is_finite() {
            return Err(Error::config("shift_strength", "must be finite and >= 0"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("noise", "must be finite and >= 0"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::config(
                "samples_per_class",
                format!("{} is too small for a train/test split (need >= 2)", self.samples_per_class),
            ));
        }
        Ok(())
    }
}

/// Class prototypes and domain shifts in raw feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub prototypes: Vec<Vec<f64>>,
    pub shifts: Vec<Vec<f64>>,
}

impl Geometry {
    pub fn random(spec: &DomainSpec, seed: u64) -> Self {
        let root = Rng::new(seed).child("datagen");
        Geometry {
            prototypes: (0..spec.num_classes)
                .map(|j| root.child(&format!("prototype:{j}")).unit_vec(spec.feature_dim))
                .collect(),
            shifts: (0..spec.num_domains)
                .map(|m| root.child(&format!("shift:{m}")).unit_vec(spec.feature_dim))
                .collect(),
        }
    }

    /// `μ_{j,m} = u_j + γ·t_m`
    pub fn mean(&self, class: usize, domain: usize, shift_strength: f64) -> Vec<f64> {
        self.prototypes[class]
            .iter()
            .zip(&self.shifts[domain])
            .map(|(u, t)| u + shift_strength * t)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainData {
    pub domain: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generates every domain with random geometry.
pub fn generate(spec: &DomainSpec, seed: u64) -> Result<Vec<DomainData>> {
    spec.validate()?;
    generate_with(spec, &Geometry::random(spec, seed), seed)
}

/// Generates every domain around the given geometry, split 80/20 per
/// (domain, class) by a seeded shuffle.
pub fn generate_with(spec: &DomainSpec, geometry: &Geometry, seed: u64) -> Result<Vec<DomainData>> {
    spec.validate()?;
    if geometry.prototypes.len() != spec.num_classes || geometry.shifts.len() != spec.num_domains {
        return Err(Error::shape(
            "generate",
            format!("{} prototypes / {} shifts", spec.num_classes, spec.num_domains),
            format!("{} / {}", geometry.prototypes.len(), geometry.shifts.len()),
        ));
    }
    let root = Rng::new(seed).child("datagen");
    let n = spec.samples_per_class;
    let n_test = ((n as f64) * 0.2).round().max(1.0) as usize;
    let mut out = Vec::with_capacity(spec.num_domains);
    for m in 0..spec.num_domains {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for j in 0..spec.num_classes {
            let mean = geometry.mean(j, m, spec.shift_strength);
            let mut noise = root.child(&format!("noise:{m}:{j}"));
            let mut samples: Vec<Sample> = (0..n)
                .map(|_| Sample {
                    x: mean.iter().map(|mu| mu + spec.noise * noise.normal()).collect(),
                    label: j,
                    domain: m,
                })
                .collect();
            root.child(&format!("split:{m}:{j}")).shuffle(&mut samples);
            let rest = samples.split_off(n_test);
            test.extend(samples);
            train.extend(rest);
        }
        out.push(DomainData { domain: m, train, test });
    }
    Ok(out)
}

/// Source training data after holding one domain out. Samples carry their
/// source slot (0..M) as the latent domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    /// Original domain id of each slot.
    pub domain_ids: Vec<usize>,
    pub train: Vec<Vec<Sample>>,
}

impl SourceSet {
    pub fn num_domains(&self) -> usize {
        self.domain_ids.len()
    }
}

pub fn leave_one_out(datasets: &[DomainData], target: usize) -> Result<(SourceSet, Vec<Sample>)> {
    if datasets.len() < 2 {
        return Err(Error::config("num_domains", "leave-one-domain-out needs at least 2 domains"));
    }
    let target_data = datasets
        .iter()
        .find(|d| d.domain == target)
        .ok_or_else(|| Error::config("target", format!("domain {target} does not exist")))?;
    let mut domain_ids = Vec::new();
    let mut train = Vec::new();
    for d in datasets.iter().filter(|d| d.domain != target) {
        let slot = domain_ids.len();
        domain_ids.push(d.domain);
        train.push(
            d.train
                .iter()
                .map(|s| Sample { domain: slot, ..s.clone() })
                .collect(),
        );
    }
    Ok((SourceSet { domain_ids, train }, target_data.test.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Each client holds one domain; a domain may spread over several clients.
    OneDomain,
    /// All source data pooled and split per class across clients.
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    /// Source slots the shard was built from.
    pub domains: Vec<usize>,
}

/// Deals every sample of each class round-robin over `owners` after a seeded shuffle.
fn deal(samples: &[Sample], num_classes: usize, owners: &[usize], rng: &Rng, label: &str, shards: &mut [ClientShard]) {
    for j in 0..num_classes {
        let mut of_class: Vec<&Sample> = samples.iter().filter(|s| s.label == j).collect();
        rng.child(&format!("{label}:class:{j}")).shuffle(&mut of_class);
        for (i, s) in of_class.into_iter().enumerate() {
            shards[owners[i % owners.len()]].samples.push(s.clone());
        }
    }
}

pub fn partition(sources: &SourceSet, num_clients: usize, mode: PartitionMode, seed: u64) -> Result<Vec<ClientShard>> {
    let m = sources.num_domains();
    if m == 0 {
        return Err(Error::Empty { op: "partition" });
    }
    if num_clients == 0 {
        return Err(Error::config("clients", "must be at least 1"));
    }
    let num_classes = sources
        .train
        .iter()
        .flatten()
        .map(|s| s.label + 1)
        .max()
        .unwrap_or(0);
    let rng = Rng::new(seed).child("partition");
    let mut shards: Vec<ClientShard> = (0..num_clients)
        .map(|k| ClientShard {
            client_id: k,
            samples: Vec::new(),
            domains: Vec::new(),
        })
        .collect();
    match mode {
        PartitionMode::OneDomain => {
            if num_clients < m {
                return Err(Error::config(
                    "clients",
                    format!("one_domain partition needs at least {m} clients, got {num_clients}"),
                ));
            }
            for (slot, data) in sources.train.iter().enumerate() {
                let owners: Vec<usize> = (0..num_clients).filter(|k| k % m == slot).collect();
                for &k in &owners {
                    shards[k].domains.push(slot);
                }
                deal(data, num_classes, &owners, &rng, &format!("domain:{slot}"), &mut shards);
            }
        }
        PartitionMode::Mixed => {
            let pooled: Vec<Sample> = sources.train.iter().flatten().cloned().collect();
            let owners: Vec<usize> = (0..num_clients).collect();
            deal(&pooled, num_classes, &owners, &rng, "mixed", &mut shards);
            for s in &mut shards {
                let mut d: Vec<usize> = s.samples.iter().map(|x| x.domain).collect();
                d.sort_unstable();
                d.dedup();
                s.domains = d;
            }
        }
    }
    Ok(shards)
}

#[derive(Serialize)]
struct Dump<'a> {
    spec: &'a DomainSpec,
    domains: &'a [DomainData],
}

/// Structured text dump of the generated data, floats at 17 significant digits.
pub fn dump_json(spec: &DomainSpec, datasets: &[DomainData]) -> Result<String> {
    json::to_line(&Dump { spec, domains: datasets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DomainSpec {
        DomainSpec::default()
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate(&spec(), 3).unwrap(), generate(&spec(), 3).unwrap());
        assert_ne!(generate(&spec(), 3).unwrap(), generate(&spec(), 4).unwrap());
    }

    #[test]
    fn split_is_80_20_and_class_balanced() {
        let data = generate(&spec(), 1).unwrap();
        for d in &data {
            assert_eq!(d.train.len(), 48 * 5);
            assert_eq!(d.test.len(), 12 * 5);
            for j in 0..5 {
                assert_eq!(d.test.iter().filter(|s| s.label == j).count(), 12);
            }
        }
        let mut tiny = spec();
        tiny.samples_per_class = 2;
        let data = generate(&tiny, 1).unwrap();
        assert!(data.iter().all(|d| d.test.len() == 5 && d.train.len() == 5));
        tiny.samples_per_class = 1;
        assert!(generate(&tiny, 1).unwrap_err().is_config());
    }

    #[test]
    fn zero_noise_reproduces_means() {
        let mut s = spec();
        s.noise = 0.0;
        let g = Geometry::random(&s, 5);
        let data = generate(&s, 5).unwrap();
        for d in &data {
            for x in d.train.iter().chain(&d.test) {
                assert_eq!(x.x, g.mean(x.label, d.domain, s.shift_strength));
            }
        }
    }

    #[test]
    fn no_shift_means_identical_domains() {
        let mut s = spec();
        s.shift_strength = 0.0;
        let data = generate(&s, 9).unwrap();
        let n = s.samples_per_class as f64;
        let bound = 3.0 * s.noise / n.sqrt();
        for j in 0..s.num_classes {
            let mean = |m: usize| -> Vec<f64> {
                let xs: Vec<&Sample> = data[m].train.iter().chain(&data[m].test).filter(|x| x.label == j).collect();
                (0..s.feature_dim).map(|c| xs.iter().map(|x| x.x[c]).sum::<f64>() / xs.len() as f64).collect()
            };
            let (a, b) = (mean(0), mean(1));
            // RMS over coordinates; its expectation is σ·√(2/n)
            let rms = (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / s.feature_dim as f64).sqrt();
            assert!(rms < bound, "class {j}: {rms} >= {bound}");
        }
    }

    #[test]
    fn leave_one_out_relabels_and_isolates_target() {
        let data = generate(&spec(), 2).unwrap();
        let (src, target) = leave_one_out(&data, 2).unwrap();
        assert_eq!(src.domain_ids, vec![0, 1, 3]);
        assert_eq!(src.num_domains(), 3);
        assert_eq!(target, data[2].test);
        assert!(src.train[2].iter().all(|s| s.domain == 2));
        for t in &target {
            assert!(src.train.iter().flatten().all(|s| s.x != t.x));
        }
        assert!(leave_one_out(&data, 4).is_err());
        assert!(leave_one_out(&data[..1], 0).is_err());
    }

    #[test]
    fn every_domain_is_target_once() {
        let data = generate(&spec(), 2).unwrap();
        let mut seen = Vec::new();
        for t in 0..4 {
            let (src, _) = leave_one_out(&data, t).unwrap();
            assert!(!src.domain_ids.contains(&t));
            seen.push(t);
        }
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    fn sorted_xs(samples: impl Iterator<Item = Sample>) -> Vec<Vec<u64>> {
        let mut v: Vec<Vec<u64>> = samples.map(|s| s.x.iter().map(|x| x.to_bits()).collect()).collect();
        v.sort();
        v
    }

    #[test]
    fn one_domain_partition() {
        let data = generate(&spec(), 2).unwrap();
        let (src, _) = leave_one_out(&data, 0).unwrap();
        let shards = partition(&src, 20, PartitionMode::OneDomain, 1).unwrap();
        let mut counts = [0usize; 3];
        for s in &shards {
            assert_eq!(s.domains.len(), 1);
            let d = s.domains[0];
            assert!(s.samples.iter().all(|x| x.domain == d));
            counts[d] += 1;
        }
        assert_eq!(counts, [7, 7, 6]);
        assert_eq!(
            sorted_xs(shards.into_iter().flat_map(|s| s.samples)),
            sorted_xs(src.train.iter().flatten().cloned())
        );

        let one_to_one = partition(&src, 3, PartitionMode::OneDomain, 1).unwrap();
        for (k, s) in one_to_one.iter().enumerate() {
            assert_eq!(s.domains, vec![k]);
            assert_eq!(s.samples.len(), src.train[k].len());
        }
        assert!(partition(&src, 2, PartitionMode::OneDomain, 1).unwrap_err().is_config());
    }

    #[test]
    fn mixed_partition_is_complete_and_balanced() {
        let data = generate(&spec(), 2).unwrap();
        let (src, _) = leave_one_out(&data, 3).unwrap();
        let shards = partition(&src, 7, PartitionMode::Mixed, 4).unwrap();
        let total: usize = shards.iter().map(|s| s.samples.len()).sum();
        assert_eq!(total, 3 * 240);
        let sizes: Vec<usize> = shards.iter().map(|s| s.samples.len()).collect();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 5, "{sizes:?}");
        assert_eq!(
            sorted_xs(shards.into_iter().flat_map(|s| s.samples)),
            sorted_xs(src.train.iter().flatten().cloned())
        );
    }

    #[test]
    fn dump_is_parseable_json() {
        let mut s = spec();
        s.samples_per_class = 5;
        s.num_domains = 2;
        let data = generate(&s, 1).unwrap();
        let text = dump_json(&s, &data).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["domains"].as_array().unwrap().len(), 2);
    }
}
