//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    Ok(())
}

/// Averages a matrix with its transpose; the result is exactly symmetric.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Slack on the eigenvalue floor that absorbs eigensolver round-off.
pub(crate) fn floor_tolerance(m: &DMatrix<f64>) -> f64 {
    1e-12 * m.norm().max(1.0)
}

/// Raises every eigenvalue below `floor` to `floor`. Matrices already above
/// the floor (up to round-off) are returned unchanged, bit for bit.
pub(crate) fn clamp_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let tol = floor_tolerance(m);
    if eig.eigenvalues.iter().all(|&l| l >= floor - tol) {
        return m.clone();
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    symmetrize(&rebuilt)
}

/// Precomputed Cholesky factor for repeated Gaussian log-density evaluation.
#[derive(Debug, Clone)]
pub(crate) struct GaussianDensity {
    mean: Vec<f64>,
    // lower-triangular factor, row-major
    chol: Vec<f64>,
    log_norm: f64,
    d: usize,
}

impl GaussianDensity {
    /// Fails with `None` when the covariance is not positive definite.
    pub(crate) fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<Self> {
        let d = mean.len();
        let chol = cov.clone().cholesky()?;
        let l = chol.l();
        let mut log_det = 0.0;
        let mut flat = vec![0.0; d * d];
        for i in 0..d {
            let lii = l[(i, i)];
            if !(lii > 0.0) || !lii.is_finite() {
                return None;
            }
            log_det += 2.0 * lii.ln();
            for j in 0..=i {
                flat[i * d + j] = l[(i, j)];
            }
        }
        Some(Self {
            mean: mean.iter().copied().collect(),
            chol: flat,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
            d,
        })
    }

    pub(crate) fn ln_pdf(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.d;
        let mut quad = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            let row = &self.chol[i * d..i * d + i];
            for (j, lij) in row.iter().enumerate() {
                s -= lij * scratch[j];
            }
            let y = s / self.chol[i * d + i];
            scratch[i] = y;
            quad += y * y;
        }
        self.log_norm - 0.5 * quad
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
