//! Factor analysis from a privatized second-moment matrix.
//!
//! The model x = Wz + e, z ~ N(0, I_q), e ~ N(0, Ψ) only sees the data
//! through Λ = (1/N) Σ x xᵀ. Releasing Λ once with Analyze Gauss makes every
//! EM iteration that follows post-processing, so the whole fit costs a
//! single mechanism invocation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::accountant::PrivacyBudget;
use crate::data::BoundedDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::mechanisms::{self, AccountingTrace, MechanismSpec, Target};
use crate::noise::NoiseSource;
use crate::sensitivity;

pub const PSI_FLOOR: f64 = 1e-6;
pub const FA_TOL: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Λ = (1/N) Σ x xᵀ and the number of rows it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    pub lambda: DMatrix<f64>,
    pub n: usize,
}

pub fn second_moment(data: &BoundedDataset) -> SecondMoment {
    let d = data.d();
    let mut m = DMatrix::zeros(d, d);
    for x in data.rows() {
        for a in 0..d {
            for b in 0..=a {
                m[(a, b)] += x[a] * x[b];
            }
        }
    }
    let n = data.n() as f64;
    for a in 0..d {
        for b in 0..=a {
            let v = m[(a, b)] / n;
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    SecondMoment {
        lambda: m,
        n: data.n(),
    }
}

/// Releases Λ once through Analyze Gauss with Frobenius sensitivity 2/N
/// and the whole budget, then projects onto eigenvalues ≥ `floor`.
pub fn perturb_second_moment(
    mom: &SecondMoment,
    total: &PrivacyBudget,
    noise: &mut dyn NoiseSource,
    floor: f64,
) -> Result<(SecondMoment, AccountingTrace)> {
    let spec = MechanismSpec::analyze_gauss(
        sensitivity::second_moment(mom.n as f64),
        total.epsilon,
        total.delta,
    )?;
    let lambda = mechanisms::analyze_gauss_perturb(&mom.lambda, &spec, noise, floor)?;
    let mut trace = AccountingTrace::new();
    trace.push(0, Target::SecondMoment, spec, total.delta);
    Ok((SecondMoment { lambda, n: mom.n }, trace))
}

/// Loadings W (d×q), diagonal noise Ψ and posterior covariance
/// G = (I + WᵀΨ⁻¹W)⁻¹.
#[derive(Debug, Clone, PartialEq)]
pub struct FaParams {
    pub w: DMatrix<f64>,
    pub psi: DVector<f64>,
    pub g: DMatrix<f64>,
}

impl FaParams {
    pub fn new(w: DMatrix<f64>, psi: DVector<f64>) -> Result<Self> {
        if w.nrows() != psi.len() {
            return Err(Error::DimensionMismatch {
                expected: psi.len(),
                found: w.nrows(),
            });
        }
        if psi.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::InvalidParams("Ψ must be positive".into()));
        }
        let g = posterior_cov(&w, &psi)?;
        Ok(Self { w, psi, g })
    }

    /// Model covariance WWᵀ + Ψ.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.w * self.w.transpose() + DMatrix::from_diagonal(&self.psi)
    }
}

fn posterior_cov(w: &DMatrix<f64>, psi: &DVector<f64>) -> Result<DMatrix<f64>> {
    let q = w.ncols();
    let psi_inv_w = scale_rows(w, psi);
    let prec = DMatrix::identity(q, q) + w.transpose() * psi_inv_w;
    let g = prec
        .cholesky()
        .ok_or(Error::SingularCovariance { component: 0 })?
        .inverse();
    Ok(linalg::symmetrize(&g))
}

/// Ψ⁻¹M for diagonal Ψ.
fn scale_rows(m: &DMatrix<f64>, psi: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / psi[i])
}

#[derive(Debug, Clone)]
pub struct FaFit {
    pub params: FaParams,
    /// Per-point log-likelihood after initialization and after each step.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-point Gaussian log-likelihood of the moment matrix under the model:
/// −½[d ln 2π + ln det C + tr(C⁻¹Λ)], C = WWᵀ + Ψ.
pub fn fa_log_likelihood(mom: &SecondMoment, params: &FaParams) -> Result<f64> {
    let d = mom.lambda.nrows() as f64;
    let c = params.covariance();
    let chol = c.cholesky().ok_or(Error::SingularCovariance { component: 0 })?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let tr = chol.solve(&mom.lambda).trace();
    Ok(-0.5 * (d * LN_2PI + log_det + tr))
}

/// Scaled-PCA start: W = V_q diag(sqrt(λ_j − σ²)) with σ² the mean of the
/// discarded eigenvalues, Ψ = diag(Λ − WWᵀ) floored.
pub fn pca_init(lambda: &DMatrix<f64>, q: usize) -> Result<FaParams> {
    let d = lambda.nrows();
    let eig = SymmetricEigen::new(lambda.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rest = &order[q..];
    let sigma2 = if rest.is_empty() {
        0.0
    } else {
        rest.iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum::<f64>() / rest.len() as f64
    };
    let mut w = DMatrix::zeros(d, q);
    for (col, &i) in order[..q].iter().enumerate() {
        let s = (eig.eigenvalues[i] - sigma2).max(0.0).sqrt();
        for r in 0..d {
            w[(r, col)] = eig.eigenvectors[(r, i)] * s;
        }
    }
    let wwt = &w * w.transpose();
    let psi = DVector::from_fn(d, |i, _| (lambda[(i, i)] - wwt[(i, i)]).max(PSI_FLOOR));
    FaParams::new(w, psi)
}

/// EM on the moment matrix for at most `iters` steps, stopping early once
/// no entry of W or Ψ moves by more than [`FA_TOL`].
pub fn run_fa_em(mom: &SecondMoment, q: usize, iters: usize) -> Result<FaFit> {
    let lambda = &mom.lambda;
    linalg::check_square(lambda)?;
    let d = lambda.nrows();
    if q >= d {
        return Err(Error::OutOfRange {
            name: "q",
            value: q as f64,
            expected: "q < d",
        });
    }
    if lambda.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("Λ has non-finite entries".into()));
    }
    let asym = linalg::max_asymmetry(lambda);
    if asym > 1e-9 {
        return Err(Error::NotSymmetric(asym));
    }
    let min = linalg::min_eigenvalue(lambda);
    if min < -linalg::floor_tolerance(lambda) {
        return Err(Error::InvalidParams(format!(
            "Λ is not positive semidefinite (eigenvalue {min:e})"
        )));
    }

    let mut params = pca_init(lambda, q)?;
    let mut lls = vec![fa_log_likelihood(mom, &params)?];
    let mut converged = false;
    let mut done = 0;
    for _ in 0..iters {
        let next = fa_step(lambda, &params)?;
        let change = (&next.w - &params.w)
            .abs()
            .max()
            .max((&next.psi - &params.psi).abs().max());
        params = next;
        lls.push(fa_log_likelihood(mom, &params)?);
        done += 1;
        if change < FA_TOL {
            converged = true;
            break;
        }
    }
    Ok(FaFit {
        params,
        log_likelihoods: lls,
        iterations: done,
        converged,
    })
}

/// One EM step:
/// W' = [ΛΨ⁻¹WG][G + GWᵀΨ⁻¹ΛΨ⁻¹WG]⁻¹, Ψ' = diag(Λ − W'GWᵀΨ⁻¹Λ).
fn fa_step(lambda: &DMatrix<f64>, p: &FaParams) -> Result<FaParams> {
    let d = lambda.nrows();
    let psi_inv_w = scale_rows(&p.w, &p.psi);
    // Λ Ψ⁻¹ W G  (d×q)
    let lpwg = lambda * &psi_inv_w * &p.g;
    // G Wᵀ Ψ⁻¹ Λ Ψ⁻¹ W G  (q×q)
    let ezz = &p.g + &p.g * psi_inv_w.transpose() * &lpwg;
    let ezz = linalg::symmetrize(&ezz);
    let w_new = if p.w.ncols() == 0 {
        p.w.clone()
    } else {
        let chol = ezz
            .cholesky()
            .ok_or(Error::SingularCovariance { component: 0 })?;
        // W' = lpwg · ezz⁻¹  ⇔  ezz · W'ᵀ = lpwgᵀ
        chol.solve(&lpwg.transpose()).transpose()
    };
    // diag(W' G Wᵀ Ψ⁻¹ Λ) = diag(W' · lpwgᵀ) since G, Λ are symmetric
    let psi = DVector::from_fn(d, |i, _| {
        let mut s = 0.0;
        for c in 0..w_new.ncols() {
            s += w_new[(i, c)] * lpwg[(i, c)];
        }
        (lambda[(i, i)] - s).max(PSI_FLOOR)
    });
    FaParams::new(w_new, psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RowMatrix;
    use crate::noise::ZeroNoise;

    fn ds(rows: &[[f64; 2]]) -> BoundedDataset {
        BoundedDataset::new(RowMatrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn moment_examples() {
        assert_eq!(
            second_moment(&ds(&[[1.0, 0.0]])).lambda,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(
            second_moment(&ds(&[[1.0, 0.0], [0.0, 1.0]])).lambda,
            DMatrix::identity(2, 2) * 0.5
        );
    }

    #[test]
    fn zero_noise_identity_and_single_record() {
        let m = second_moment(&ds(&[[0.5, 0.1], [0.2, -0.3], [0.0, 0.4]]));
        let total = PrivacyBudget::new(0.5, 1e-4).unwrap();
        let (p, trace) = perturb_second_moment(&m, &total, &mut ZeroNoise, 1e-6).unwrap();
        assert_eq!(p, m);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn no_factors_gives_diagonal() {
        let lambda = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.2]);
        let fit = run_fa_em(&SecondMoment { lambda, n: 10 }, 0, 50).unwrap();
        assert_eq!(fit.params.psi.as_slice(), &[0.4, 0.2]);
        assert_eq!(fit.params.w.ncols(), 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let lambda = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(run_fa_em(&SecondMoment { lambda: lambda.clone(), n: 1 }, 1, 5).is_err());
        let lambda = DMatrix::identity(2, 2);
        assert!(run_fa_em(&SecondMoment { lambda, n: 1 }, 2, 5).is_err());
    }

    #[test]
    fn g_matches_definition() {
        let w = DMatrix::from_row_slice(3, 1, &[0.3, -0.2, 0.5]);
        let psi = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let p = FaParams::new(w.clone(), psi.clone()).unwrap();
        let inv = DMatrix::from_diagonal(&psi.map(|v| 1.0 / v));
        let want = (DMatrix::identity(1, 1) + w.transpose() * inv * &w)
            .try_inverse()
            .unwrap();
        assert!((p.g - want).abs().max() < 1e-12);
    }

    fn planted() -> (FaParams, SecondMoment) {
        let w = DMatrix::from_row_slice(4, 1, &[0.4, -0.3, 0.2, 0.35]);
        let psi = DVector::from_vec(vec![0.05, 0.08, 0.1, 0.06]);
        let p = FaParams::new(w, psi).unwrap();
        let lambda = p.covariance();
        (p, SecondMoment { lambda, n: 100 })
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let (p, mom) = planted();
        let next = fa_step(&mom.lambda, &p).unwrap();
        assert!((&next.w - &p.w).abs().max() < 1e-12);
        assert!((&next.psi - &p.psi).abs().max() < 1e-12);
    }

    #[test]
    fn em_is_monotone_and_recovers_covariance() {
        let (_, mom) = planted();
        let fit = run_fa_em(&mom, 1, 5000).unwrap();
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert!((fit.params.covariance() - &mom.lambda).norm() < 1e-6);
    }
}
