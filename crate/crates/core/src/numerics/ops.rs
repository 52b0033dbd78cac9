use super::{dot, norm};
use crate::error::{Error, Result};

/// Probabilities are floored here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-30;

/// Counts how often a probability hit [`PROB_FLOOR`]. Healthy runs keep this at zero.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ClampCounter(pub u64);

impl ClampCounter {
    fn floor(&mut self, p: f64) -> f64 {
        if p < PROB_FLOOR {
            self.0 += 1;
            PROB_FLOOR
        } else {
            p
        }
    }
}

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a.len(), b.len()));
    }
    Ok(())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len("cosine_sim", a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate {
            op: "cosine_sim",
            detail: "zero-norm operand".into(),
        });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its gradient with respect to `b`.
///
/// `∂/∂b cos(a,b) = a/(‖a‖‖b‖) − cos(a,b)·b/‖b‖²`. Swap the arguments for the
/// gradient with respect to `a`.
pub fn cosine_sim_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len("cosine_sim_grad", a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate {
            op: "cosine_sim_grad",
            detail: "zero-norm operand".into(),
        });
    }
    // unclamped so the value stays consistent with the gradient
    let s = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let self_term = s / (nb * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| ai * inv - self_term * bi)
        .collect();
    Ok((s, grad))
}

/// Softmax of `scores / tau`, shifted by the max for stability.
pub fn softmax_temp(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config("tau", format!("must be > 0, got {tau}")));
    }
    if scores.is_empty() {
        return Err(Error::Empty { op: "softmax_temp" });
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::Degenerate {
            op: "softmax_temp",
            detail: "non-finite score".into(),
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

pub fn cross_entropy(probs: &[f64], label: usize, clamps: &mut ClampCounter) -> Result<f64> {
    let p = *probs.get(label).ok_or_else(|| Error::Domain {
        op: "cross_entropy",
        detail: format!("label {label} out of range for {} classes", probs.len()),
    })?;
    Ok(-clamps.floor(p).ln())
}

/// `KL(p ‖ q) = Σ p log(p/q)`, with `q` floored.
pub fn kl_div(p: &[f64], q: &[f64], clamps: &mut ClampCounter) -> Result<f64> {
    same_len("kl_div", p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            total += pi * (pi.ln() - clamps.floor(qi).ln());
        }
    }
    Ok(total.max(0.0))
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len("mse", a, b)?;
    if a.is_empty() {
        return Err(Error::Empty { op: "mse" });
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}
