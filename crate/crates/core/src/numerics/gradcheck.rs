/// Compares an analytic gradient against central finite differences.
///
/// Returns `max_i |fd_i − analytic_i| / max(1e-8, |fd_i| + |analytic_i|)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = loss_fn(&probe);
        probe[i] = params[i] - h;
        let down = loss_fn(&probe);
        probe[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}
