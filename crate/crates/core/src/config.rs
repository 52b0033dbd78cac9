//! Flat experiment configuration with field-level validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{DomainSpec, PartitionMode};
use crate::encoders::EncoderDims;
use crate::error::{Error, Result};
use crate::federation::{Routing, TouchRule, TrainingOptions};
use crate::inference::PredictMode;
use crate::objectives::ObjectiveOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepTag {
    Sweep,
}

/// A single held-out domain or every domain in turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Sweep(SweepTag),
    Domain(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub prompt_len: usize,
    pub tau: f64,

    pub num_domains: usize,
    pub num_classes: usize,
    pub shift_strength: f64,
    pub noise: f64,
    pub samples_per_class: usize,
    /// Blend between random data geometry (0) and geometry read off the
    /// frozen text encoder (1).
    pub alignment: f64,

    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub beta: f64,
    pub lr: f64,
    pub tau_cont: f64,
    pub partition: PartitionMode,

    pub no_g_prompt: bool,
    pub no_d_prompts: bool,
    pub no_contrastive: bool,
    pub static_query: bool,
    pub no_ensemble: bool,
    pub no_kl: bool,
    pub no_mse: bool,
    pub use_domain_labels: bool,

    pub mse_all_classes: bool,
    pub download_momentum: bool,
    pub numeric_touch: bool,

    pub target: Target,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dims = EncoderDims::default();
        let data = DomainSpec::default();
        let fed = TrainingOptions::default();
        ExperimentConfig {
            seed: 0,
            embed_dim: dims.embed_dim,
            hidden_dim: dims.hidden_dim,
            feature_dim: dims.feature_dim,
            prompt_len: 4,
            tau: dims.tau,
            num_domains: data.num_domains,
            num_classes: data.num_classes,
            shift_strength: data.shift_strength,
            noise: data.noise,
            samples_per_class: data.samples_per_class,
            alignment: 1.0,
            num_clients: fed.num_clients,
            clients_per_round: fed.clients_per_round,
            rounds: fed.rounds,
            local_iters: fed.local_iters,
            batch_size: fed.batch_size,
            lambda: fed.lambda,
            beta: fed.beta,
            lr: fed.lr,
            tau_cont: fed.objective.tau_cont,
            partition: PartitionMode::OneDomain,
            no_g_prompt: false,
            no_d_prompts: false,
            no_contrastive: false,
            static_query: false,
            no_ensemble: false,
            no_kl: false,
            no_mse: false,
            use_domain_labels: false,
            mse_all_classes: false,
            download_momentum: false,
            numeric_touch: false,
            target: Target::Sweep(SweepTag::Sweep),
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be at least 1"));
    }
    Ok(())
}

fn positive_f(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::config(field, format!("must be finite and > 0, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        positive("embed_dim", self.embed_dim)?;
        positive("hidden_dim", self.hidden_dim)?;
        positive("prompt_len", self.prompt_len)?;
        positive_f("tau", self.tau)?;
        positive_f("tau_cont", self.tau_cont)?;
        if self.num_domains < 2 {
            return Err(Error::config("num_domains", "leave-one-domain-out needs at least 2 domains"));
        }
        self.domain_spec().validate()?;
        if !(0.0..=1.0).contains(&self.alignment) {
            return Err(Error::config("alignment", format!("must be in [0, 1], got {}", self.alignment)));
        }
        if let Target::Domain(t) = self.target {
            if t >= self.num_domains {
                return Err(Error::config(
                    "target",
                    format!("domain {t} out of range for {} domains", self.num_domains),
                ));
            }
        }
        if self.partition == PartitionMode::OneDomain && self.num_clients < self.num_domains - 1 {
            return Err(Error::config(
                "num_clients",
                format!("one_domain partition needs at least {} clients", self.num_domains - 1),
            ));
        }
        if self.no_d_prompts && self.no_g_prompt {
            return Err(Error::config("no_g_prompt", "cannot be combined with no_d_prompts"));
        }
        if self.static_query && self.use_domain_labels {
            return Err(Error::config("static_query", "cannot be combined with use_domain_labels"));
        }
        self.training_options().validate()
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            feature_dim: self.feature_dim,
            tau: self.tau,
        }
    }

    pub fn domain_spec(&self) -> DomainSpec {
        DomainSpec {
            num_domains: self.num_domains,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            shift_strength: self.shift_strength,
            noise: self.noise,
            samples_per_class: self.samples_per_class,
        }
    }

    pub fn targets(&self) -> Vec<usize> {
        match self.target {
            Target::Sweep(_) => (0..self.num_domains).collect(),
            Target::Domain(t) => vec![t],
        }
    }

    /// Federation settings with the ablation flags applied.
    pub fn training_options(&self) -> TrainingOptions {
        let flag = |off: bool| if off { 0.0 } else { 1.0 };
        TrainingOptions {
            num_clients: self.num_clients,
            clients_per_round: self.clients_per_round,
            rounds: self.rounds,
            local_iters: self.local_iters,
            batch_size: self.batch_size,
            lambda: if self.no_d_prompts { 0.0 } else { self.lambda },
            beta: self.beta,
            lr: self.lr,
            objective: ObjectiveOptions {
                tau_cont: self.tau_cont,
                global_weight: flag(self.no_g_prompt),
                contrastive_weight: flag(self.no_contrastive),
                mse_weight: flag(self.no_mse),
                kl_weight: flag(self.no_kl),
                mse_all_classes: self.mse_all_classes,
            },
            routing: if self.use_domain_labels {
                Routing::DomainLabels
            } else if self.static_query {
                Routing::Static
            } else {
                Routing::Learned
            },
            download_momentum: self.download_momentum,
            touch_rule: if self.numeric_touch { TouchRule::Numeric } else { TouchRule::Structural },
            parallel: true,
            seed: self.seed,
        }
    }

    /// The prediction path that represents this configuration.
    pub fn primary_mode(&self) -> PredictMode {
        if self.no_d_prompts {
            PredictMode::GOnly
        } else if self.no_ensemble {
            PredictMode::TopDomainOnly
        } else {
            PredictMode::Ensemble
        }
    }

    pub fn g_weight(&self) -> f64 {
        if self.no_g_prompt {
            0.0
        } else {
            1.0
        }
    }
}
