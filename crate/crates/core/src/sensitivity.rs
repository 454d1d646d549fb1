//! Worst-case sensitivities of the released statistics, and the
//! fixed-denominator moment statistics they bound.
//!
//! The bounds assume every row lies in the unit L2 ball and every
//! responsibility lies in [0, 1]. [`moment_statistics`] evaluates the
//! statistics with the counts held fixed, which is the form the bounds
//! apply to; comparing it across neighboring datasets gives an empirical
//! check of each bound.

use nalgebra::{DMatrix, DVector};

use crate::data::BoundedDataset;
use crate::error::{Error, Result};
use crate::mog::Responsibilities;

/// L1 (and L2) change of the weight vector: 2/N.
pub fn weights(n: f64) -> f64 {
    2.0 / n
}

/// L1 change of one mean: 2√d / count.
pub fn mean_l1(d: usize, count: f64) -> f64 {
    2.0 * (d as f64).sqrt() / count
}

/// L2 change of one mean: 2 / count.
pub fn mean_l2(count: f64) -> f64 {
    2.0 / count
}

/// Frobenius change of one covariance (second-moment form): 2 / count.
pub fn covariance(count: f64) -> f64 {
    2.0 / count
}

/// Frobenius change of the data second-moment matrix (1/N)XᵀX: 2/N.
pub fn second_moment(n: f64) -> f64 {
    2.0 / n
}

/// Per-component statistics with caller-supplied denominators.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentStatistics {
    /// (1/N) Σ_i γ_ik.
    pub weights: Vec<f64>,
    /// (1/N_k) Σ_i γ_ik x_i.
    pub means: Vec<DVector<f64>>,
    /// (1/N_k) Σ_i γ_ik x_i x_iᵀ.
    pub second_moments: Vec<DMatrix<f64>>,
}

/// Evaluates the weight, mean and second-moment statistics of each
/// component, dividing by the fixed `counts` instead of the counts implied
/// by `resp`.
pub fn moment_statistics(
    data: &BoundedDataset,
    resp: &Responsibilities,
    counts: &[f64],
) -> Result<MomentStatistics> {
    let (n, d, k) = (data.n(), data.d(), resp.k());
    if resp.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: resp.n(),
        });
    }
    if counts.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: counts.len(),
        });
    }
    if counts.iter().any(|c| !(*c > 0.0)) {
        return Err(Error::InvalidParams("counts must be positive".into()));
    }
    let mut weights = vec![0.0; k];
    let mut means = vec![DVector::zeros(d); k];
    let mut second = vec![DMatrix::zeros(d, d); k];
    for (i, x) in data.rows().enumerate() {
        let xv = DVector::from_column_slice(x);
        let outer = &xv * xv.transpose();
        for j in 0..k {
            let g = resp.get(i, j);
            weights[j] += g;
            means[j] += &xv * g;
            second[j] += &outer * g;
        }
    }
    for j in 0..k {
        weights[j] /= n as f64;
        means[j] /= counts[j];
        second[j] /= counts[j];
    }
    Ok(MomentStatistics {
        weights,
        means,
        second_moments: second,
    })
}
