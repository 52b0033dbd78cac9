//! Finite-difference verification of every training objective over random
//! small configurations.

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::encoders::{EncoderDims, FrozenEncoders, TokenVocab};
use crate::error::Result;
use crate::numerics::{finite_diff_check, Mat, Rng};
use crate::objectives::{local_objective, loss_d_and_grad, loss_g_and_grad, loss_q_and_grad, Frozen, ObjectiveOptions};
use crate::prompts::{init_prompt_bank, PromptBank};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub family: String,
    pub configs: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub families: Vec<FamilyResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.families.iter().all(|f| f.passed)
    }
}

struct Case {
    enc: FrozenEncoders,
    vocab: TokenVocab,
    bank: PromptBank,
    batch: Vec<Sample>,
    momentum_q: Mat,
    routes: Vec<usize>,
    lambda: f64,
    slot: usize,
    opts: ObjectiveOptions,
}

impl Case {
    fn frozen(&self) -> Frozen<'_> {
        Frozen {
            encoder: &self.enc,
            vocab: &self.vocab,
        }
    }
}

fn pick(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + ((rng.uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
}

fn random_case(seed: u64) -> Result<Case> {
    let mut rng = Rng::new(seed).child("gradcheck");
    let d = pick(&mut rng, 3, 8);
    let dims = EncoderDims {
        embed_dim: d,
        hidden_dim: pick(&mut rng, 3, 10),
        feature_dim: pick(&mut rng, 2, 6),
        tau: 0.05 + rng.uniform(),
    };
    let classes = pick(&mut rng, 2, 4);
    let domains = pick(&mut rng, 1, 3);
    let prompt_len = pick(&mut rng, 1, 4);
    let enc = FrozenEncoders::new(dims, seed);
    let vocab = TokenVocab::new(d, classes, domains, seed);
    let ids: Vec<usize> = (0..domains).collect();
    let mut bank = init_prompt_bank(prompt_len, classes, &ids, &vocab, seed)?;
    let scale = 0.1 + rng.uniform();
    bank.g_prompt.as_mut_slice().iter_mut().for_each(|v| *v = scale * rng.normal());
    for p in &mut bank.d_prompts {
        p.tokens.as_mut_slice().iter_mut().for_each(|v| *v = scale * rng.normal());
    }
    let momentum_q = bank.q_prompt.clone();
    bank.q_prompt.as_mut_slice().iter_mut().for_each(|v| *v += 0.3 * rng.normal());
    let n = pick(&mut rng, 1, 6);
    let batch: Vec<Sample> = (0..n)
        .map(|_| Sample {
            x: rng.normal_vec(dims.feature_dim, 1.0),
            label: pick(&mut rng, 0, classes - 1),
            domain: pick(&mut rng, 0, domains - 1),
        })
        .collect();
    let routes = (0..n).map(|_| pick(&mut rng, 0, domains - 1)).collect();
    Ok(Case {
        enc,
        vocab,
        bank,
        batch,
        momentum_q,
        routes,
        lambda: 0.1 + 2.0 * rng.uniform(),
        slot: pick(&mut rng, 0, domains - 1),
        opts: ObjectiveOptions {
            tau_cont: 0.2 + rng.uniform(),
            mse_all_classes: rng.uniform() < 0.5,
            ..Default::default()
        },
    })
}

fn scaled(grad: &[f64], perturb: f64) -> Vec<f64> {
    grad.iter().map(|g| g * (1.0 + perturb)).collect()
}

fn replace(m: &Mat, flat: &[f64]) -> Mat {
    Mat::from_vec(m.rows(), m.cols(), flat.to_vec()).expect("same shape")
}

fn check_g(c: &Case, perturb: f64) -> Result<f64> {
    let lg = loss_g_and_grad(&c.bank, c.frozen(), &c.batch)?;
    let f = |p: &[f64]| {
        let mut b = c.bank.clone();
        b.g_prompt = replace(&b.g_prompt, p);
        loss_g_and_grad(&b, c.frozen(), &c.batch).map_or(f64::NAN, |l| l.loss)
    };
    Ok(finite_diff_check(f, c.bank.g_prompt.as_slice(), &scaled(lg.grad.as_slice(), perturb), STEP))
}

fn check_d(c: &Case, perturb: f64) -> Result<f64> {
    let m = c.slot;
    let ld = loss_d_and_grad(&c.bank, c.frozen(), &c.batch, m, &c.opts)?;
    let f = |p: &[f64]| {
        let mut b = c.bank.clone();
        b.d_prompts[m].tokens = replace(&b.d_prompts[m].tokens, p);
        loss_d_and_grad(&b, c.frozen(), &c.batch, m, &c.opts).map_or(f64::NAN, |l| l.total)
    };
    Ok(finite_diff_check(f, c.bank.d_prompts[m].tokens.as_slice(), &scaled(ld.grad.as_slice(), perturb), STEP))
}

fn check_q(c: &Case, perturb: f64) -> Result<f64> {
    let lq = loss_q_and_grad(&c.bank, &c.momentum_q, c.frozen(), &c.batch, &c.opts)?;
    let f = |p: &[f64]| {
        let mut b = c.bank.clone();
        b.q_prompt = replace(&b.q_prompt, p);
        loss_q_and_grad(&b, &c.momentum_q, c.frozen(), &c.batch, &c.opts).map_or(f64::NAN, |l| l.total)
    };
    Ok(finite_diff_check(f, c.bank.q_prompt.as_slice(), &scaled(lq.grad.as_slice(), perturb), STEP))
}

/// The G block against the full combined value; each touched D slot against
/// its own λ-weighted term, since other slots are constants inside it.
fn check_combined(c: &Case, perturb: f64) -> Result<f64> {
    let lo = local_objective(&c.bank, c.frozen(), &c.batch, c.lambda, &c.routes, &c.opts)?;
    let n = c.batch.len() as f64;
    let total = |b: &PromptBank| local_objective(b, c.frozen(), &c.batch, c.lambda, &c.routes, &c.opts);
    let fg = |p: &[f64]| {
        let mut b = c.bank.clone();
        b.g_prompt = replace(&b.g_prompt, p);
        total(&b).map_or(f64::NAN, |l| l.report.total)
    };
    let mut worst = finite_diff_check(fg, c.bank.g_prompt.as_slice(), &scaled(lo.grad_g.as_slice(), perturb), STEP);
    for (m, grad) in lo.grad_d.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let fd = |p: &[f64]| {
            let mut b = c.bank.clone();
            b.d_prompts[m].tokens = replace(&b.d_prompts[m].tokens, p);
            total(&b).map_or(f64::NAN, |l| {
                let t = l.report.loss_d[m].expect("slot stays routed");
                c.lambda * t.samples as f64 / n * (t.ce + c.opts.contrastive_weight * t.cont)
            })
        };
        worst = worst.max(finite_diff_check(
            fd,
            c.bank.d_prompts[m].tokens.as_slice(),
            &scaled(grad.as_slice(), perturb),
            STEP,
        ));
    }
    Ok(worst)
}

/// Runs all four families over `configs` random configurations. `perturb`
/// scales every analytic gradient by `1 + perturb` and exists to show the
/// check can fail.
pub fn run_gradcheck(configs: usize, perturb: f64) -> Result<GradcheckReport> {
    type Check = fn(&Case, f64) -> Result<f64>;
    let families: [(&str, Check); 4] = [
        ("global", check_g),
        ("domain", check_d),
        ("query", check_q),
        ("combined", check_combined),
    ];
    let cases = (0..configs as u64).map(random_case).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(families.len());
    for (name, check) in families {
        let mut worst: f64 = 0.0;
        for c in &cases {
            let e = check(c, perturb)?;
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        out.push(FamilyResult {
            family: name.to_string(),
            configs,
            max_rel_err: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        step: STEP,
        families: out,
    })
}
