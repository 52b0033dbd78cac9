//! Leave-one-domain-out experiment runner and run-directory output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Target};
use crate::datagen::{generate_with, leave_one_out, partition, DomainData, Geometry, Sample};
use crate::encoders::{DualEncoder, FrozenEncoders, TokenVocab};
use crate::error::Result;
use crate::federation::{run_training, RoundMetrics, TrainingOutcome};
use crate::inference::{evaluate_mode, EnsembleCache, EvaluationReport, PredictMode};
use crate::json;
use crate::numerics::Mat;
use crate::objectives::Frozen;
use crate::prompts::{init_prompt_bank, Checkpoint, PromptBank};

/// Frozen encoders, vocabulary and generated data shared by every target.
pub struct World {
    pub encoders: FrozenEncoders,
    pub vocab: TokenVocab,
    pub geometry: Geometry,
    pub datasets: Vec<DomainData>,
}

impl World {
    pub fn frozen(&self) -> Frozen<'_> {
        Frozen {
            encoder: &self.encoders,
            vocab: &self.vocab,
        }
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = crate::numerics::norm(&v);
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

/// Blends random prototypes and shifts with directions the frozen encoders
/// already associate with each class and domain token: `W_fᵀ g([token])`.
pub fn aligned_geometry(random: &Geometry, encoders: &FrozenEncoders, vocab: &TokenVocab, alignment: f64) -> Result<Geometry> {
    if alignment == 0.0 {
        return Ok(random.clone());
    }
    let pull = |token: &[f64], base: &[f64]| -> Result<Vec<f64>> {
        let z = encoders.encode_text(&Mat::from_rows(&[token.to_vec()])?)?;
        let dir = normalized(encoders.image_map().matvec_t(&z)?);
        Ok(normalized(
            base.iter().zip(&dir).map(|(b, d)| (1.0 - alignment) * b + alignment * d).collect(),
        ))
    };
    let prototypes = random
        .prototypes
        .iter()
        .enumerate()
        .map(|(j, u)| pull(vocab.class_token(j)?, u))
        .collect::<Result<Vec<_>>>()?;
    let shifts = random
        .shifts
        .iter()
        .enumerate()
        .map(|(m, t)| pull(vocab.domain_token(m)?, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Geometry { prototypes, shifts })
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    cfg.validate()?;
    let encoders = FrozenEncoders::new(cfg.encoder_dims(), cfg.seed);
    let vocab = TokenVocab::new(cfg.embed_dim, cfg.num_classes, cfg.num_domains, cfg.seed);
    let spec = cfg.domain_spec();
    let geometry = aligned_geometry(&Geometry::random(&spec, cfg.seed), &encoders, &vocab, cfg.alignment)?;
    let datasets = generate_with(&spec, &geometry, cfg.seed)?;
    Ok(World {
        encoders,
        vocab,
        geometry,
        datasets,
    })
}

pub struct TargetRun {
    pub target: usize,
    /// Vocabulary domain ids of the sources, in slot order.
    pub source_ids: Vec<usize>,
    pub outcome: TrainingOutcome,
    /// Final `V^G`, momentum-averaged D-Prompts, initial Q-Prompt.
    pub bank: PromptBank,
    pub reports: Vec<EvaluationReport>,
    pub target_test: Vec<Sample>,
}

impl TargetRun {
    pub fn accuracy(&self, mode: PredictMode) -> f64 {
        self.reports.iter().find(|r| r.mode == mode).map_or(f64::NAN, |r| r.accuracy)
    }

    /// Train-mode routing accuracy over every routed sample of the run.
    pub fn query_accuracy(&self) -> Option<f64> {
        let mut correct = 0.0;
        let mut total = 0usize;
        for r in &self.outcome.rounds {
            if let Some(acc) = r.query_accuracy {
                let n: usize = r.routed.iter().sum();
                correct += acc * n as f64;
                total += n;
            }
        }
        (total > 0).then(|| correct / total as f64)
    }
}

pub fn run_target(cfg: &ExperimentConfig, world: &World, target: usize) -> Result<TargetRun> {
    let (sources, target_test) = leave_one_out(&world.datasets, target)?;
    let shards = partition(&sources, cfg.num_clients, cfg.partition, cfg.seed)?;
    let template = init_prompt_bank(cfg.prompt_len, cfg.num_classes, &sources.domain_ids, &world.vocab, cfg.seed)?;
    let opts = cfg.training_options();
    let outcome = run_training(&template, world.frozen(), shards, &opts)?;
    let bank = outcome.inference_bank(&template)?;
    let cache = EnsembleCache::from_bank(&bank, world.frozen(), cfg.g_weight())?;
    let reports = PredictMode::ALL
        .iter()
        .map(|&mode| evaluate_mode(&target_test, &cache, &world.encoders, mode, target))
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetRun {
        target,
        source_ids: sources.domain_ids,
        outcome,
        bank,
        reports,
        target_test,
    })
}

#[derive(Serialize)]
struct TimingRecord {
    round: usize,
    seconds: f64,
}

pub fn metrics_lines(rounds: &[RoundMetrics]) -> Result<String> {
    let mut out = String::new();
    for r in rounds {
        out.push_str(&json::to_line(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `config.json`, `metrics.jsonl`, `timing.jsonl`, `checkpoint.json`
/// and `evaluation.jsonl` into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, run: &TargetRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    let echo = ExperimentConfig {
        target: Target::Domain(run.target),
        ..cfg.clone()
    };
    fs::write(dir.join("config.json"), echo.to_json()? + "\n")?;
    fs::write(dir.join("metrics.jsonl"), metrics_lines(&run.outcome.rounds)?)?;
    let mut timing = String::new();
    for (round, &seconds) in run.outcome.round_seconds.iter().enumerate() {
        timing.push_str(&json::to_line(&TimingRecord { round, seconds })?);
        timing.push('\n');
    }
    fs::write(dir.join("timing.jsonl"), timing)?;
    Checkpoint::from_bank(&run.bank, cfg.seed, cfg.rounds).save(&dir.join("checkpoint.json"))?;
    let mut eval = String::new();
    for r in &run.reports {
        eval.push_str(&json::to_line(r)?);
        eval.push('\n');
    }
    fs::write(dir.join("evaluation.jsonl"), eval)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub target: usize,
    pub ensemble: f64,
    pub g_only: f64,
    pub top_domain_only: f64,
    pub primary: f64,
    pub query_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub primary_mode: PredictMode,
    pub rows: Vec<SummaryRow>,
}

impl ExperimentSummary {
    pub fn mean(&self, f: impl Fn(&SummaryRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_primary(&self) -> f64 {
        self.mean(|r| r.primary)
    }

    pub fn mean_ensemble(&self) -> f64 {
        self.mean(|r| r.ensemble)
    }

    pub fn mean_g_only(&self) -> f64 {
        self.mean(|r| r.g_only)
    }

    pub fn mean_query_accuracy(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.query_accuracy).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Per-target accuracies (percent) with the average in the last column.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<16}", "mode");
        for r in &self.rows {
            let _ = write!(s, "{:>10}", format!("target {}", r.target));
        }
        let _ = writeln!(s, "{:>10}", "avg");
        let lines: [(&str, fn(&SummaryRow) -> f64); 3] = [
            ("ensemble", |r| r.ensemble),
            ("g_only", |r| r.g_only),
            ("top_domain_only", |r| r.top_domain_only),
        ];
        for (name, f) in lines {
            let _ = write!(s, "{name:<16}");
            for r in &self.rows {
                let _ = write!(s, "{:>10.2}", 100.0 * f(r));
            }
            let _ = writeln!(s, "{:>10.2}", 100.0 * self.mean(f));
        }
        if let Some(q) = self.mean_query_accuracy() {
            let _ = write!(s, "{:<16}", "query_acc");
            for r in &self.rows {
                let _ = write!(s, "{:>10.2}", 100.0 * r.query_accuracy.unwrap_or(f64::NAN));
            }
            let _ = writeln!(s, "{:>10.2}", 100.0 * q);
        }
        s
    }
}

pub fn summary_row(cfg: &ExperimentConfig, run: &TargetRun) -> SummaryRow {
    SummaryRow {
        target: run.target,
        ensemble: run.accuracy(PredictMode::Ensemble),
        g_only: run.accuracy(PredictMode::GOnly),
        top_domain_only: run.accuracy(PredictMode::TopDomainOnly),
        primary: run.accuracy(cfg.primary_mode()),
        query_accuracy: run.query_accuracy(),
    }
}

/// Runs every configured target. Without `out` nothing is written.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentSummary> {
    let world = build_world(cfg)?;
    let targets = cfg.targets();
    let sweep = matches!(cfg.target, Target::Sweep(_));
    let mut rows = Vec::with_capacity(targets.len());
    for t in targets {
        let run = run_target(cfg, &world, t)?;
        if let Some(out) = out {
            let dir: PathBuf = if sweep { out.join(format!("target_{t}")) } else { out.to_path_buf() };
            write_run_dir(&dir, cfg, &run)?;
        }
        rows.push(summary_row(cfg, &run));
    }
    let summary = ExperimentSummary {
        primary_mode: cfg.primary_mode(),
        rows,
    };
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        if sweep {
            fs::write(out.join("config.json"), cfg.to_json()? + "\n")?;
        }
        fs::write(out.join("summary.json"), json::to_line(&summary)? + "\n")?;
        fs::write(out.join("summary.txt"), summary.table())?;
    }
    Ok(summary)
}
