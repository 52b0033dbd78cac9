//! Target-domain prediction with the weighted prompt ensemble and its
//! ablation paths.

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::numerics::{argmax, axpy, cosine_sim};
use crate::objectives::{class_probs, domain_text_embeddings, global_text_embeddings, Frozen};
use crate::prompts::PromptBank;

/// Precomputed class text embeddings for the G-Prompt and every D-Prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleCache {
    pub global: Vec<Vec<f64>>,
    /// `domains[m][j]`
    pub domains: Vec<Vec<Vec<f64>>>,
    /// `w_g`; 1 unless the G-Prompt is ablated.
    pub g_weight: f64,
}

impl EnsembleCache {
    pub fn from_bank(bank: &PromptBank, frozen: Frozen<'_>, g_weight: f64) -> Result<Self> {
        let global = global_text_embeddings(bank, frozen)?;
        let domains = (0..bank.num_domains())
            .map(|m| domain_text_embeddings(bank, m, frozen))
            .collect::<Result<Vec<_>>>()?;
        let cache = EnsembleCache { global, domains, g_weight };
        if !cache.global.iter().chain(cache.domains.iter().flatten()).flatten().all(|v| v.is_finite()) {
            return Err(Error::Degenerate {
                op: "EnsembleCache::from_bank",
                detail: "non-finite text embedding".into(),
            });
        }
        Ok(cache)
    }

    pub fn num_classes(&self) -> usize {
        self.global.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub domain: Vec<f64>,
    pub global: f64,
    /// Scores were shifted by +1 because one of them was not positive.
    pub shifted: bool,
    /// All shifted scores were zero and uniform weights were used.
    pub degenerate: bool,
}

/// `w_m ∝ max_j cos(I, Z^m_j)`, normalized over domains.
pub fn ensemble_weights(image: &[f64], cache: &EnsembleCache) -> Result<EnsembleWeights> {
    let mut scores = Vec::with_capacity(cache.num_domains());
    for texts in &cache.domains {
        let mut best = f64::NEG_INFINITY;
        for z in texts {
            best = best.max(cosine_sim(image, z)?);
        }
        scores.push(best);
    }
    let shifted = scores.iter().any(|s| *s <= 0.0);
    if shifted {
        scores.iter_mut().for_each(|s| *s += 1.0);
    }
    let total: f64 = scores.iter().sum();
    let m = scores.len() as f64;
    let degenerate = !(total > 0.0);
    let domain = if degenerate {
        vec![1.0 / m; scores.len()]
    } else {
        scores.iter().map(|s| s / total).collect()
    };
    Ok(EnsembleWeights {
        domain,
        global: cache.g_weight,
        shifted,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    Ensemble,
    GOnly,
    TopDomainOnly,
}

impl PredictMode {
    pub const ALL: [PredictMode; 3] = [PredictMode::Ensemble, PredictMode::GOnly, PredictMode::TopDomainOnly];

    pub fn name(self) -> &'static str {
        match self {
            PredictMode::Ensemble => "ensemble",
            PredictMode::GOnly => "g_only",
            PredictMode::TopDomainOnly => "top_domain_only",
        }
    }
}

fn ensemble_texts(cache: &EnsembleCache, w: &EnsembleWeights) -> Vec<Vec<f64>> {
    (0..cache.num_classes())
        .map(|j| {
            let mut z = vec![0.0; cache.global[j].len()];
            for (m, texts) in cache.domains.iter().enumerate() {
                axpy(w.domain[m], &texts[j], &mut z);
            }
            axpy(w.global, &cache.global[j], &mut z);
            z
        })
        .collect()
}

/// `Z_j = Σ_m w_m Z^m_j + w_g Z^G_j`, then the usual class softmax.
pub fn ensemble_predict(x: &[f64], cache: &EnsembleCache, encoder: &dyn DualEncoder) -> Result<(Vec<f64>, usize)> {
    let image = encoder.encode_image(x)?;
    let w = ensemble_weights(&image, cache)?;
    let probs = class_probs(&image, &ensemble_texts(cache, &w), encoder.tau())?;
    let class = argmax(&probs);
    Ok((probs, class))
}

pub fn predict_ablation(x: &[f64], cache: &EnsembleCache, encoder: &dyn DualEncoder, mode: PredictMode) -> Result<usize> {
    let image = encoder.encode_image(x)?;
    let probs = match mode {
        PredictMode::Ensemble => return Ok(ensemble_predict(x, cache, encoder)?.1),
        PredictMode::GOnly => class_probs(&image, &cache.global, encoder.tau())?,
        PredictMode::TopDomainOnly => {
            let w = ensemble_weights(&image, cache)?;
            class_probs(&image, &cache.domains[argmax(&w.domain)], encoder.tau())?
        }
    };
    Ok(argmax(&probs))
}

/// Top-1 accuracy of `predictor` over `dataset`.
pub fn evaluate<F>(dataset: &[Sample], predictor: F) -> Result<f64>
where
    F: Fn(&Sample) -> Result<usize>,
{
    if dataset.is_empty() {
        return Err(Error::Empty { op: "evaluate" });
    }
    let mut correct = 0usize;
    for s in dataset {
        correct += usize::from(predictor(s)? == s.label);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub target_domain: usize,
    pub mode: PredictMode,
    pub accuracy: f64,
    pub n_samples: usize,
    pub mean_weights: Vec<f64>,
    pub shifted: usize,
    pub degenerate: usize,
}

pub fn evaluate_mode(
    dataset: &[Sample],
    cache: &EnsembleCache,
    encoder: &dyn DualEncoder,
    mode: PredictMode,
    target_domain: usize,
) -> Result<EvaluationReport> {
    let accuracy = evaluate(dataset, |s| predict_ablation(&s.x, cache, encoder, mode))?;
    let mut mean_weights = vec![0.0; cache.num_domains()];
    let (mut shifted, mut degenerate) = (0, 0);
    for s in dataset {
        let w = ensemble_weights(&encoder.encode_image(&s.x)?, cache)?;
        axpy(1.0 / dataset.len() as f64, &w.domain, &mut mean_weights);
        shifted += usize::from(w.shifted);
        degenerate += usize::from(w.degenerate);
    }
    Ok(EvaluationReport {
        target_domain,
        mode,
        accuracy,
        n_samples: dataset.len(),
        mean_weights,
        shifted,
        degenerate,
    })
}
