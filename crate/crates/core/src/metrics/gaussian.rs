use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::validation(format!(
                "{}x{} covariance for a {d}-dimensional mean",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(Self { mean, covariance, count })
    }

    /// Fits rows of `features` (`N x D`) with the unbiased covariance
    /// estimator.
    pub fn fit(features: &DMatrix<f64>) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::validation(format!("covariance needs at least 2 samples, got {n}")));
        }
        let mean = features.row_mean().transpose();
        let mut centered = features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let covariance = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, covariance, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Trace of the principal square root of a symmetric matrix, with negative
/// eigenvalues clamped to zero.
fn trace_sqrt_psd(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum()
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of `(S_a S_b)^(1/2)` is computed as that of the symmetric
/// `(S_a^(1/2) S_b S_a^(1/2))^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!("feature dimensions {} and {} differ", a.dim(), b.dim())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let root_a = sqrt_psd(&a.covariance);
    let cross = trace_sqrt_psd(&(&root_a * &b.covariance * &root_a));
    let value = diff + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}
