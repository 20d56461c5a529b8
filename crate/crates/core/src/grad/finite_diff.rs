//! Central finite differences, the independent oracle for every analytic
//! gradient in the crate.

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for every coordinate `i`.
pub fn finite_diff<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let plus = f(&probe)?;
        probe[i] = theta[i] - eps;
        let minus = f(&probe)?;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "function is not finite around coordinate {i} ({plus}, {minus})"
            )));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gives_twice_theta() {
        let theta = [0.3, -1.2, 2.5];
        let g = finite_diff(|t| Ok(t.iter().map(|x| x * x).sum()), &theta, DEFAULT_EPS).unwrap();
        for (gi, ti) in g.iter().zip(theta) {
            // central differences are exact for quadratics up to rounding
            assert!((gi - 2.0 * ti).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff(|_| Ok(4.2), &[1.0, 2.0], DEFAULT_EPS).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn sine_derivative_at_zero() {
        let g = finite_diff(|t| Ok(t[0].sin()), &[0.0], DEFAULT_EPS).unwrap();
        // sin(ε)/ε = 1 − ε²/6 + …
        assert!((g[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let err = finite_diff(|t| Ok(1.0 / t[0]), &[0.0], 0.0).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
        let err = finite_diff(|t| Ok((t[0] - 1e-5).ln()), &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
