//! Per-domain principal component analysis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Mean, top-`d` principal axes and their variances for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStats {
    pub mean: DVector<f64>,
    /// `D x d`, orthonormal columns ordered by decreasing eigenvalue.
    pub projection: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl DomainStats {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }
}

/// Full eigen-decomposition of a domain's sample covariance, sorted by
/// decreasing eigenvalue.
#[derive(Debug, Clone)]
pub struct PcaSpectrum {
    pub mean: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub samples: usize,
}

const EIGEN_EPS: f64 = 1e-14;
const EIGEN_MAX_ITER: usize = 10_000;

impl PcaSpectrum {
    /// `x` holds one sample per row.
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        let (n, dim) = x.shape();
        if n < 2 {
            return Err(Error::arg(format!("PCA needs at least 2 samples, got {n}")));
        }
        if dim == 0 {
            return Err(Error::arg("PCA needs at least one feature"));
        }
        let mean = x.row_mean().transpose();
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
        // exact symmetry for the symmetric solver
        cov = (&cov + cov.transpose()) * 0.5;

        let eig = SymmetricEigen::try_new(cov, EIGEN_EPS, EIGEN_MAX_ITER).ok_or_else(|| {
            Error::Numerical("symmetric eigen-decomposition did not converge".into())
        })?;

        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });

        let mut vectors = DMatrix::zeros(dim, dim);
        let mut values = Vec::with_capacity(dim);
        for (dst, &src) in order.iter().enumerate() {
            let mut col = eig.eigenvectors.column(src).into_owned();
            canonical_sign(&mut col);
            vectors.set_column(dst, &col);
            values.push(eig.eigenvalues[src].max(0.0));
        }
        Ok(Self {
            mean,
            eigenvectors: vectors,
            eigenvalues: values,
            samples: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Largest admissible target dimension: `min(N - 1, D)`.
    pub fn max_components(&self) -> usize {
        (self.samples - 1).min(self.dim())
    }

    /// Smallest `k` whose leading eigenvalues hold at least `fraction` of the
    /// total variance.
    pub fn components_for_variance(&self, fraction: f64) -> usize {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return 1;
        }
        let mut acc = 0.0;
        for (i, v) in self.eigenvalues.iter().enumerate() {
            acc += v;
            if acc >= fraction * total {
                return i + 1;
            }
        }
        self.eigenvalues.len()
    }

    pub fn truncate(&self, d: usize) -> Result<DomainStats> {
        if d == 0 || d > self.max_components() {
            return Err(Error::arg(format!(
                "target dimension {d} outside [1, {}] for N = {}, D = {}",
                self.max_components(),
                self.samples,
                self.dim()
            )));
        }
        Ok(DomainStats {
            mean: self.mean.clone(),
            projection: self.eigenvectors.columns(0, d).into_owned(),
            eigenvalues: self.eigenvalues[..d].to_vec(),
        })
    }
}

// Flip so the entry of largest magnitude is positive; makes the basis a pure
// function of the covariance rather than of solver internals.
fn canonical_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

pub fn fit_pca(x: &DMatrix<f64>, d: usize) -> Result<DomainStats> {
    PcaSpectrum::fit(x)?.truncate(d)
}

/// `(X - 1 mu^T) P_d`, one sample per row.
pub fn project(stats: &DomainStats, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != stats.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.input_dim(),
            got: x.ncols(),
        });
    }
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= stats.mean.transpose();
    }
    Ok(centered * &stats.projection)
}

pub fn project_vector(stats: &DomainStats, x: &[f64]) -> Result<DVector<f64>> {
    if x.len() != stats.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: stats.input_dim(),
            got: x.len(),
        });
    }
    let centered = DVector::from_column_slice(x) - &stats.mean;
    Ok(stats.projection.tr_mul(&centered))
}
