//! Orthogonal Procrustes: `argmin_R ||X_D R - X_S||_F` subject to `R^T R = I`.
//!
//! With `U S V^T = svd(X_S^T X_D)` the minimizer is `R = V U^T`; the singular
//! values are only used to detect a non-unique optimum.

use nalgebra::{DMatrix, SVD};

use crate::error::{Error, Result};

/// Relative singular-value gap below which the optimum is flagged non-unique.
pub const DEGENERACY_GAP: f64 = 1e-8;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone)]
pub struct ProcrustesFit {
    pub rotation: DMatrix<f64>,
    /// Singular values of the cross-covariance, non-increasing.
    pub singular_values: Vec<f64>,
    /// Tied or vanishing singular values: another orthogonal matrix attains
    /// the same objective.
    pub non_unique: bool,
}

/// Rows of `drone` and `satellite` must be in correspondence.
///
/// With `strict_rotation` the solution is restricted to `det R = +1` by
/// flipping the singular vector pair of the smallest singular value.
pub fn fit_procrustes(
    drone: &DMatrix<f64>,
    satellite: &DMatrix<f64>,
    strict_rotation: bool,
) -> Result<ProcrustesFit> {
    if drone.nrows() != satellite.nrows() {
        return Err(Error::arg(format!(
            "row count mismatch: {} drone rows vs {} satellite rows",
            drone.nrows(),
            satellite.nrows()
        )));
    }
    if drone.ncols() != satellite.ncols() {
        return Err(Error::DimensionMismatch {
            expected: drone.ncols(),
            got: satellite.ncols(),
        });
    }
    if drone.nrows() == 0 || drone.ncols() == 0 {
        return Err(Error::arg(
            "Procrustes needs at least one row and one column",
        ));
    }

    let cross = satellite.tr_mul(drone);
    let svd = SVD::try_new(cross, true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("SVD of the cross-covariance did not converge".into()))?;
    let u = svd.u.as_ref().expect("u requested");
    let mut v = svd.v_t.as_ref().expect("v_t requested").transpose();
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();

    let mut rotation = &v * u.transpose();
    if strict_rotation && rotation.determinant() < 0.0 {
        let last = v.ncols() - 1;
        v.column_mut(last).neg_mut();
        rotation = &v * u.transpose();
    }

    Ok(ProcrustesFit {
        non_unique: is_degenerate(&sigma),
        rotation,
        singular_values: sigma,
    })
}

fn is_degenerate(sigma: &[f64]) -> bool {
    let max = sigma.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return true;
    }
    let tol = DEGENERACY_GAP * max;
    sigma.windows(2).any(|w| (w[0] - w[1]).abs() < tol) || sigma.last().is_some_and(|&s| s < tol)
}

/// `||X_D R - X_S||_F^2`.
pub fn procrustes_objective(
    drone: &DMatrix<f64>,
    satellite: &DMatrix<f64>,
    rotation: &DMatrix<f64>,
) -> f64 {
    (drone * rotation - satellite).norm_squared()
}
