//! Central finite-difference gradient checking.
//!
//! These helpers never touch the tape's backward rules: they re-run a
//! caller-supplied forward closure with perturbed parameters, so they stay an
//! independent check on the analytic gradients. Use double precision; central
//! differences with h = 1e-5 are not trustworthy in f32.

/// Central finite-difference gradients of `loss_fn` with respect to every
/// entry of every parameter vector, step size `h`.
pub fn finite_difference_grads<F>(mut loss_fn: F, params: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let original = work[p][i];
            work[p][i] = original + h;
            let up = loss_fn(&work);
            work[p][i] = original - h;
            let down = loss_fn(&work);
            work[p][i] = original;
            g[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative error between analytic and numeric gradients.
///
/// Per entry: |a - n| / max(|a|, |n|, 1e-6), so entries that are tiny on both
/// sides cannot blow up the ratio.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Convenience: check one parameter group and panic with a located report on
/// failure. `label` names the group in the panic message.
pub fn assert_close(label: &str, analytic: &[f64], numeric: &[f64], tol: f64) {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "{label}: gradient length mismatch"
    );
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        assert!(
            rel <= tol,
            "{label}[{i}]: analytic {a} vs numeric {n} (rel err {rel:.3e} > {tol:.0e})"
        );
    }
}
