use super::{NumericsError, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Central finite differences: `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NumericsError::NonFinite("finite_diff_grad evaluation"));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, the repo-wide gradient comparison.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm() {
        let g = finite_diff_grad(|t| 0.5 * t.iter().map(|x| x * x).sum::<f64>(), &[1.0, 2.0], DEFAULT_FD_STEP)
            .unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let g = finite_diff_grad(|_| 3.5, &[0.1, -4.0, 9.0], DEFAULT_FD_STEP).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn bilinear_product() {
        let g = finite_diff_grad(|t| t[0] * t[1], &[3.0, 5.0], DEFAULT_FD_STEP).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-7 && (g[1] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn non_finite_is_an_error() {
        let r = finite_diff_grad(|t| if t[0] > 0.0 { f64::INFINITY } else { 0.0 }, &[0.0], 1e-3);
        assert!(r.is_err());
    }
}
