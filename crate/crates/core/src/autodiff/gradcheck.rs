use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_FD_EPS: f64 = 1e-6;

/// Central-difference gradient of a scalar function of a matrix.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Matrix) -> f64,
    at: &Matrix,
    eps: f64,
) -> Result<Matrix> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Argument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for idx in 0..at.len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + eps;
        let plus = f(&probe);
        probe.as_mut_slice()[idx] = orig - eps;
        let minus = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

pub fn max_relative_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("max_relative_error", a.shape(), b.shape()));
    }
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max))
}
