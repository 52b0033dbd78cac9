use std::f64::consts::PI;

use crate::error::{Error, Result};

// Lanczos approximation, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of `|Γ(x)|` for `x > 0`, using reflection below 0.5.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x)Γ(1−x) = π / sin(πx)
        return (PI / (PI * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Density of the symmetric `Beta(beta, beta)` distribution at `x`.
pub fn beta_pdf(x: f64, beta: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain {
            op: "beta_pdf",
            detail: format!("x = {x} outside (0, 1)"),
        });
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Domain {
            op: "beta_pdf",
            detail: format!("beta = {beta} must be positive"),
        });
    }
    // ln B(β,β) = 2 ln Γ(β) − ln Γ(2β)
    let ln_norm = 2.0 * ln_gamma(beta) - ln_gamma(2.0 * beta);
    let ln_kernel = (beta - 1.0) * (x.ln() + (1.0 - x).ln());
    Ok((ln_kernel - ln_norm).exp())
}
