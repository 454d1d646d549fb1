//! Output perturbation: Laplace and Gaussian noise on weights and means,
//! Analyze-Gauss noise on symmetric matrices, and the projections that keep
//! released parameters valid (simplex clipping, eigenvalue clamping).
//!
//! Every invocation can be logged to an [`AccountingTrace`], which the
//! accountant turns back into a total privacy spend.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::linalg;
use crate::noise::NoiseSource;

/// Noised counts below this are replaced by it before dividing.
pub const NOISED_COUNT_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    /// Laplace noise; `noise_scale` is the scale b, `sensitivity` is L1.
    Laplace,
    /// Gaussian noise; `noise_scale` is σ, `sensitivity` is L2.
    Gaussian,
    /// Symmetric Gaussian matrix noise; `noise_scale` is the variance β,
    /// `sensitivity` is Frobenius.
    AnalyzeGauss,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub kind: MechanismKind,
    pub sensitivity: f64,
    pub noise_scale: f64,
}

impl MechanismSpec {
    /// Laplace mechanism giving `epsilon`-DP for the given L1 sensitivity.
    pub fn laplace(sensitivity: f64, epsilon: f64) -> Result<Self> {
        check_range("sensitivity", sensitivity, sensitivity >= 0.0, ">= 0")?;
        check_range("epsilon", epsilon, epsilon > 0.0, "> 0")?;
        Ok(Self {
            kind: MechanismKind::Laplace,
            sensitivity,
            noise_scale: sensitivity / epsilon,
        })
    }

    /// Classical Gaussian mechanism giving (`epsilon`, `delta`)-DP.
    pub fn gaussian(sensitivity: f64, epsilon: f64, delta: f64) -> Result<Self> {
        Ok(Self {
            kind: MechanismKind::Gaussian,
            sensitivity,
            noise_scale: gaussian_sigma(sensitivity, epsilon, delta)?,
        })
    }

    /// Analyze Gauss with β = σ² from the classical calibration.
    pub fn analyze_gauss(sensitivity: f64, epsilon: f64, delta: f64) -> Result<Self> {
        let sigma = gaussian_sigma(sensitivity, epsilon, delta)?;
        Ok(Self {
            kind: MechanismKind::AnalyzeGauss,
            sensitivity,
            noise_scale: sigma * sigma,
        })
    }

    /// Standard deviation (Gaussian kinds) or scale (Laplace) of one draw.
    pub fn draw_scale(&self) -> f64 {
        match self.kind {
            MechanismKind::AnalyzeGauss => self.noise_scale.sqrt(),
            _ => self.noise_scale,
        }
    }

    fn draw(&self, noise: &mut dyn NoiseSource) -> f64 {
        match self.kind {
            MechanismKind::Laplace => noise.laplace(self.noise_scale),
            _ => noise.gaussian(self.draw_scale()),
        }
    }
}

/// Minimal σ for the classical Gaussian mechanism:
/// σ = Δ·sqrt(2 ln(1.25/δ))/ε, valid for 0 < ε < 1.
///
/// Zero sensitivity gives σ = 0; callers treat that as "no noise needed".
pub fn gaussian_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    check_range("sensitivity", sensitivity, sensitivity >= 0.0, ">= 0")?;
    check_range("epsilon", epsilon, epsilon > 0.0 && epsilon < 1.0, "0 < epsilon < 1")?;
    check_range("delta", delta, delta > 0.0 && delta < 1.0, "0 < delta < 1")?;
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Which released quantity a trace record refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "param", content = "index")]
pub enum Target {
    Weights,
    Mean(usize),
    Covariance(usize),
    SecondMoment,
    /// Joint release of per-cluster counts and coordinate sums.
    ClusterSums,
    Centroid(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub target: Target,
    pub spec: MechanismSpec,
    /// δ the Gaussian kinds were calibrated for; 0 for Laplace.
    pub delta: f64,
    /// The sensitivity was computed from a floored noised count.
    pub floored: bool,
}

/// Ordered log of every mechanism invocation in a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccountingTrace {
    pub records: Vec<TraceRecord>,
    pub warnings: Vec<String>,
}

impl AccountingTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, iteration: usize, target: Target, spec: MechanismSpec, delta: f64) {
        self.records.push(TraceRecord {
            iteration,
            target,
            spec,
            delta,
            floored: false,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_kind(&self, kind: MechanismKind) -> usize {
        self.records.iter().filter(|r| r.spec.kind == kind).count()
    }

    pub fn floored_count(&self) -> usize {
        self.records.iter().filter(|r| r.floored).count()
    }
}

/// Outcome of [`perturb_simplex`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexRelease {
    pub weights: Vec<f64>,
    /// Every coordinate clipped to zero; the uniform vector was released.
    pub fell_back: bool,
}

fn check_simplex(w: &[f64]) -> Result<()> {
    let s: f64 = w.iter().sum();
    if w.is_empty() || w.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParams(format!("{w:?} is not on the simplex")));
    }
    Ok(())
}

/// Adds i.i.d. noise to each weight, clips to [0, 1] and renormalizes.
pub fn perturb_simplex(
    weights: &[f64],
    spec: &MechanismSpec,
    noise: &mut dyn NoiseSource,
) -> Result<SimplexRelease> {
    check_simplex(weights)?;
    if spec.kind == MechanismKind::AnalyzeGauss {
        return Err(Error::InvalidParams("matrix mechanism on a vector".into()));
    }
    let noisy: Vec<f64> = weights
        .iter()
        .map(|w| (w + spec.draw(noise)).clamp(0.0, 1.0))
        .collect();
    let total: f64 = noisy.iter().sum();
    if total > 0.0 {
        Ok(SimplexRelease {
            weights: noisy.iter().map(|w| w / total).collect(),
            fell_back: false,
        })
    } else {
        let k = weights.len();
        Ok(SimplexRelease {
            weights: vec![1.0 / k as f64; k],
            fell_back: true,
        })
    }
}

/// Adds i.i.d. noise to each coordinate. Means are not projected.
pub fn perturb_mean(
    mean: &DVector<f64>,
    spec: &MechanismSpec,
    noise: &mut dyn NoiseSource,
) -> Result<DVector<f64>> {
    if spec.kind == MechanismKind::AnalyzeGauss {
        return Err(Error::InvalidParams("matrix mechanism on a vector".into()));
    }
    Ok(mean.map(|m| m + spec.draw(noise)))
}

/// Replaces a noised count at or below [`NOISED_COUNT_FLOOR`] by the floor.
/// The flag reports whether the floor was applied.
pub fn floor_noised_count(count: f64) -> (f64, bool) {
    if count <= NOISED_COUNT_FLOOR || !count.is_finite() {
        (NOISED_COUNT_FLOOR, true)
    } else {
        (count, false)
    }
}

/// Analyze Gauss: symmetric N(0, β) noise on the upper triangle (diagonal
/// included, drawn row by row), mirrored, added, then projected so every
/// eigenvalue is at least `floor`.
pub fn analyze_gauss_perturb(
    cov: &DMatrix<f64>,
    spec: &MechanismSpec,
    noise: &mut dyn NoiseSource,
    floor: f64,
) -> Result<DMatrix<f64>> {
    linalg::check_square(cov)?;
    let asym = linalg::max_asymmetry(cov);
    if asym > 1e-9 {
        return Err(Error::NotSymmetric(asym));
    }
    if spec.kind != MechanismKind::AnalyzeGauss {
        return Err(Error::InvalidParams(
            "analyze_gauss_perturb needs an AnalyzeGauss spec".into(),
        ));
    }
    let d = cov.nrows();
    let mut out = linalg::symmetrize(cov);
    for i in 0..d {
        for j in i..d {
            let z = spec.draw(noise);
            out[(i, j)] += z;
            if i != j {
                out[(j, i)] += z;
            }
        }
    }
    psd_project(&out, floor)
}

/// Eigendecomposes a symmetric matrix and lifts eigenvalues below `floor`
/// to `floor`. Input that already satisfies the floor is returned as is.
pub fn psd_project(mat: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    linalg::check_square(mat)?;
    if let Some(idx) = mat.iter().position(|v| !v.is_finite()) {
        let n = mat.nrows();
        return Err(Error::NonFinite {
            row: idx % n,
            col: idx / n,
        });
    }
    let asym = linalg::max_asymmetry(mat);
    if asym > 1e-9 * mat.norm().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(linalg::clamp_eigenvalues(mat, floor))
}
