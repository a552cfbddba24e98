//! Rank and subspace queries, backed by nalgebra's SVD.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

use super::Matrix;

/// Relative singular-value threshold used when callers do not pick one.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let mut sv: Vec<f64> = to_nalgebra(m).singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values strictly greater than `tol * sigma_max`.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::Argument(format!(
            "rank tolerance must be positive, got {tol}"
        )));
    }
    let sv = singular_values(m);
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    if sigma_max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * sigma_max).count())
}

pub fn numerical_rank_default(m: &Matrix) -> usize {
    numerical_rank(m, DEFAULT_RANK_TOL).expect("default tolerance is positive")
}

/// Max-abs residual of the least-squares projection of `target`'s columns onto
/// the column space of `basis`. Zero (up to roundoff) iff `col(target) ⊆ col(basis)`.
pub fn column_space_residual(basis: &Matrix, target: &Matrix) -> Result<f64> {
    if basis.rows() != target.rows() {
        return Err(Error::shape(
            "column_space_residual",
            basis.shape(),
            target.shape(),
        ));
    }
    let svd = to_nalgebra(basis).svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma_max = svd.singular_values.max();
    let t = to_nalgebra(target);
    let mut projection = DMatrix::<f64>::zeros(t.nrows(), t.ncols());
    if sigma_max > 0.0 {
        for (j, &s) in svd.singular_values.iter().enumerate() {
            if s > DEFAULT_RANK_TOL * sigma_max {
                let col = u.column(j);
                let coeffs = col.transpose() * &t;
                projection += col * coeffs;
            }
        }
    }
    Ok((t - projection).amax())
}

/// Row-space counterpart of [`column_space_residual`].
pub fn row_space_residual(basis: &Matrix, target: &Matrix) -> Result<f64> {
    if basis.cols() != target.cols() {
        return Err(Error::shape(
            "row_space_residual",
            basis.shape(),
            target.shape(),
        ));
    }
    column_space_residual(&basis.transpose(), &target.transpose())
}
