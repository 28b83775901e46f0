//! Central finite-difference gradient checking.
//!
//! The checker perturbs each input coordinate by `±h` and compares the
//! numeric slope against an analytic gradient. It knows nothing about the
//! graph internals; it only re-evaluates a closure.

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative error between two gradient vectors.
///
/// The denominator is floored at `1e-6` so that near-zero pairs compare
/// absolutely instead of amplifying finite-difference noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_slope() {
        let g = finite_diff_grad(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floors_tiny_denominators() {
        assert!(max_rel_err(&[0.0], &[1e-9]) < 1e-2);
    }
}
