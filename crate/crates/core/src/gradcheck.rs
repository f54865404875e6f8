//! Central finite differences for validating analytic gradients.

/// Central-difference gradient of `f` at `theta`. The step is scaled per
/// coordinate; `theta` is restored before returning.
pub fn central_diff<F>(mut f: F, theta: &mut [f64]) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = theta[i];
        let h = 6e-6 * orig.abs().max(1.0);
        theta[i] = orig + h;
        let plus = f(theta);
        theta[i] = orig - h;
        let minus = f(theta);
        theta[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Worst-case component error relative to the largest gradient magnitude:
/// max_i |a_i - n_i| / max(max_j |a_j|, max_j |n_j|, 1e-12).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_quadratic_gradient() {
        // f(x) = sum i * x_i^2 has gradient 2 i x_i.
        let mut theta = vec![0.3, -1.2, 2.5];
        let numeric = central_diff(
            |t| t.iter().enumerate().map(|(i, x)| i as f64 * x * x).sum(),
            &mut theta,
        );
        let analytic: Vec<f64> = theta
            .iter()
            .enumerate()
            .map(|(i, x)| 2.0 * i as f64 * x)
            .collect();
        assert!(max_rel_error(&analytic, &numeric) < 1e-9);
        assert_eq!(theta, vec![0.3, -1.2, 2.5]);
    }
}
