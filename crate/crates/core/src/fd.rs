//! Central finite differences for verifying the hand-written backward
//! passes. Used by the test suites and by the `selftest` runner.

/// d f / d x_i at `point` via central differences with step `h`.
pub fn central_diff<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let fp = f(&probe);
        probe[i] = point[i] - h;
        let fm = f(&probe);
        probe[i] = point[i];
        grads.push((fp - fm) / (2.0 * h));
    }
    grads
}

/// Worst relative error between analytic and numeric gradients, with the
/// floor from [`crate::num::rel_err`].
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| crate::num::rel_err(a, n))
        .fold(0.0, f64::max)
}
