//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{invalid, Error, Result};

/// Pivot threshold (relative to the largest diagonal of the normal matrix)
/// below which an unregularized system is reported as rank deficient.
const RANK_TOL: f64 = 1e-13;

/// Default ridge weight `1e-8 · trace(ΦᵀΦ) / cols`.
pub fn default_ridge(phi: &DMatrix<f64>) -> f64 {
    if phi.ncols() == 0 {
        return 0.0;
    }
    1e-8 * phi.norm_squared() / phi.ncols() as f64
}

/// Solves `argmin ||y − Φτ||² + λ||τ||²` through the normal equations
/// `(ΦᵀΦ + λI) τ = Φᵀy` and a Cholesky factorization.
pub fn ridge_solve(phi: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if phi.nrows() != y.len() {
        return Err(invalid(format!("design has {} rows but {} observations", phi.nrows(), y.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("ridge weight must be finite and non-negative, got {lambda}")));
    }
    let cols = phi.ncols();
    if cols == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut normal = phi.tr_mul(phi);
    let max_diag = normal.diagonal().max();
    for k in 0..cols {
        normal[(k, k)] += lambda;
    }
    let rhs = phi.tr_mul(y);
    let chol: Cholesky<f64, Dyn> = Cholesky::new(normal).ok_or(Error::RankDeficient { cols })?;
    if lambda == 0.0 {
        let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, &d| m.min(d * d));
        if !(min_pivot > RANK_TOL * max_diag) {
            return Err(Error::RankDeficient { cols });
        }
    }
    let tau = chol.solve(&rhs);
    if tau.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("least-squares solution is not finite".into()));
    }
    Ok(tau)
}
