//! Mixture-of-Gaussians model: parameters, E-step, MLE/MAP M-steps,
//! log-likelihood, initialization and the plain (non-private) EM loop.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::BoundedDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, GaussianDensity};
use crate::par::Exec;

/// Default lower bound on covariance eigenvalues.
pub const PSD_FLOOR: f64 = 1e-6;

/// A component whose responsibility mass is at most this fraction of N is
/// treated as degenerate by the MLE M-step.
pub const COUNT_FLOOR_FRACTION: f64 = 1e-8;

const SIMPLEX_TOL: f64 = 1e-9;
const SYMMETRY_TOL: f64 = 1e-9;

/// Mixture weights, component means and component covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct MoGParams {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

impl MoGParams {
    /// Builds parameters after checking every invariant: weights on the
    /// simplex, symmetric covariances with eigenvalues at least
    /// [`PSD_FLOOR`].
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let p = Self::new_unchecked(weights, means, covariances)?;
        p.check_invariants(PSD_FLOOR)?;
        Ok(p)
    }

    /// Checks shapes only. Weights and covariances are taken as given, so
    /// a singular covariance is reported later by [`e_step`] or
    /// [`log_likelihood`].
    pub fn new_unchecked(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Empty("mixture has no components"));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: means.len().min(covariances.len()),
            });
        }
        let d = means[0].len();
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: m.len(),
                });
            }
            if c.nrows() != d || c.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: c.nrows().max(c.ncols()),
                });
            }
        }
        Ok(Self {
            weights,
            means,
            covariances,
        })
    }

    pub fn check_invariants(&self, psd_floor: f64) -> Result<()> {
        let mut total = 0.0;
        for &w in &self.weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidParams(format!("negative or non-finite weight {w}")));
            }
            total += w;
        }
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidParams(format!("weights sum to {total}")));
        }
        for (k, c) in self.covariances.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite()) || self.means[k].iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams(format!("component {k} has non-finite entries")));
            }
            let asym = linalg::max_asymmetry(c);
            if asym > SYMMETRY_TOL {
                return Err(Error::NotSymmetric(asym));
            }
            let min = linalg::min_eigenvalue(c);
            // reconstruction after eigenvalue clamping can land a few ulps
            // below the floor
            let slack = 1e-12 * c.norm().max(1.0);
            if min < psd_floor - slack {
                return Err(Error::InvalidParams(format!(
                    "covariance {k} has eigenvalue {min:e} below floor {psd_floor:e}"
                )));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub(crate) fn densities(&self) -> Result<Vec<GaussianDensity>> {
        self.means
            .iter()
            .zip(&self.covariances)
            .enumerate()
            .map(|(k, (m, c))| {
                GaussianDensity::new(m, c).ok_or(Error::SingularCovariance { component: k })
            })
            .collect()
    }
}

/// Posterior membership probabilities and their column sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    gamma: Vec<f64>,
    k: usize,
    counts: Vec<f64>,
}

impl Responsibilities {
    /// Validates a row-major N×K matrix of membership probabilities.
    pub fn from_rows(gamma: Vec<f64>, k: usize) -> Result<Self> {
        if k == 0 || gamma.len() % k != 0 {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: gamma.len(),
            });
        }
        for (i, row) in gamma.chunks_exact(k).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|g| !(0.0..=1.0).contains(g)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParams(format!(
                    "responsibility row {i} is not a probability vector"
                )));
            }
        }
        Ok(Self::from_validated(gamma, k))
    }

    /// One-hot responsibilities from hard labels.
    pub fn one_hot(labels: &[usize], k: usize) -> Result<Self> {
        let mut gamma = vec![0.0; labels.len() * k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::InvalidParams(format!("label {l} >= k = {k}")));
            }
            gamma[i * k + l] = 1.0;
        }
        Ok(Self::from_validated(gamma, k))
    }

    fn from_validated(gamma: Vec<f64>, k: usize) -> Self {
        let mut counts = vec![0.0; k];
        for row in gamma.chunks_exact(k) {
            for (c, g) in counts.iter_mut().zip(row) {
                *c += g;
            }
        }
        Self { gamma, k, counts }
    }

    pub fn n(&self) -> usize {
        self.gamma.len() / self.k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.k..(i + 1) * self.k]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.gamma[i * self.k + k]
    }

    /// N_k = Σ_i γ_ik.
    pub fn counts(&self) -> &[f64] {
        &self.counts
    }
}

/// Dirichlet / Normal-inverse-Wishart hyperparameters for MAP estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPrior {
    pub dirichlet_alpha: Vec<f64>,
    pub kappa0: f64,
    pub nu0: f64,
    pub s0: DMatrix<f64>,
}

impl MapPrior {
    /// α = 2, κ0 = 1, ν0 = d + 2, S0 = 0.1·I.
    pub fn default_for(k: usize, d: usize) -> Self {
        Self {
            dirichlet_alpha: vec![2.0; k],
            kappa0: 1.0,
            nu0: d as f64 + 2.0,
            s0: DMatrix::identity(d, d) * 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mle,
    Map,
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mle" => Ok(Estimator::Mle),
            "map" => Ok(Estimator::Map),
            other => Err(Error::InvalidParams(format!("unknown estimator {other:?}"))),
        }
    }
}

fn check_dims(data: &BoundedDataset, params: &MoGParams) -> Result<()> {
    if data.d() != params.d() {
        return Err(Error::DimensionMismatch {
            expected: params.d(),
            found: data.d(),
        });
    }
    Ok(())
}

/// γ_ik ∝ π_k N(x_i | μ_k, Σ_k), computed in the log domain.
pub fn e_step(data: &BoundedDataset, params: &MoGParams) -> Result<Responsibilities> {
    e_step_with(data, params, Exec::default())
}

const ROW_CHUNK: usize = 256;

pub fn e_step_with(
    data: &BoundedDataset,
    params: &MoGParams,
    exec: Exec,
) -> Result<Responsibilities> {
    check_dims(data, params)?;
    let dens = params.densities()?;
    let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();
    let k = params.k();
    let d = data.d();
    let mut gamma = vec![0.0; data.n() * k];
    exec.fill_chunks(&mut gamma, ROW_CHUNK * k, |chunk, out| {
        let mut scratch = vec![0.0; d];
        let mut logp = vec![0.0; k];
        for (r, g) in out.chunks_exact_mut(k).enumerate() {
            let x = data.row(chunk * ROW_CHUNK + r);
            for j in 0..k {
                logp[j] = log_w[j] + dens[j].ln_pdf(x, &mut scratch);
            }
            let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..k {
                g[j] = (logp[j] - m).exp();
                total += g[j];
            }
            g.iter_mut().for_each(|v| *v /= total);
        }
    });
    Ok(Responsibilities::from_validated(gamma, k))
}

/// Per-component weighted statistics: Σγ, Σγx and the centered scatter
/// Σγ(x-μ)(x-μ)ᵀ about the weighted mean (zero when the mass is zero).
#[derive(Debug, Clone)]
pub(crate) struct ComponentStats {
    pub count: f64,
    pub sum: DVector<f64>,
    pub scatter: DMatrix<f64>,
}

impl ComponentStats {
    pub fn mean(&self) -> DVector<f64> {
        if self.count > 0.0 {
            &self.sum / self.count
        } else {
            DVector::zeros(self.sum.len())
        }
    }
}

pub(crate) fn component_stats(
    data: &BoundedDataset,
    resp: &Responsibilities,
    exec: Exec,
) -> Result<Vec<ComponentStats>> {
    if resp.n() != data.n() {
        return Err(Error::DimensionMismatch {
            expected: data.n(),
            found: resp.n(),
        });
    }
    let d = data.d();
    Ok(exec.map(resp.k(), |k| {
        let mut sum = DVector::zeros(d);
        let mut count = 0.0;
        for (i, x) in data.rows().enumerate() {
            let g = resp.get(i, k);
            if g != 0.0 {
                count += g;
                for j in 0..d {
                    sum[j] += g * x[j];
                }
            }
        }
        let mut scatter = DMatrix::zeros(d, d);
        if count > 0.0 {
            let mu = &sum / count;
            let mut diff = vec![0.0; d];
            for (i, x) in data.rows().enumerate() {
                let g = resp.get(i, k);
                if g == 0.0 {
                    continue;
                }
                for j in 0..d {
                    diff[j] = x[j] - mu[j];
                }
                for a in 0..d {
                    let ga = g * diff[a];
                    for b in 0..=a {
                        scatter[(a, b)] += ga * diff[b];
                    }
                }
            }
            for a in 0..d {
                for b in 0..a {
                    scatter[(b, a)] = scatter[(a, b)];
                }
            }
        }
        ComponentStats {
            count,
            sum,
            scatter,
        }
    }))
}

fn floor_cov(c: DMatrix<f64>) -> DMatrix<f64> {
    linalg::clamp_eigenvalues(&c, PSD_FLOOR)
}

/// Closed-form maximum-likelihood update.
pub fn m_step_mle(data: &BoundedDataset, resp: &Responsibilities) -> Result<MoGParams> {
    let stats = component_stats(data, resp, Exec::default())?;
    let n = data.n() as f64;
    let floor = COUNT_FLOOR_FRACTION * n;
    for (k, s) in stats.iter().enumerate() {
        if s.count <= floor {
            return Err(Error::DegenerateComponent {
                component: k,
                count: s.count,
            });
        }
    }
    Ok(mle_from_stats(&stats, n))
}

pub(crate) fn mle_from_stats(stats: &[ComponentStats], n: f64) -> MoGParams {
    let weights = stats.iter().map(|s| s.count / n).collect();
    let means = stats.iter().map(|s| s.mean()).collect();
    let covariances = stats
        .iter()
        .map(|s| floor_cov(&s.scatter / s.count))
        .collect();
    MoGParams {
        weights,
        means,
        covariances,
    }
}

/// Maximum a posteriori update under a Dirichlet / NIW prior. Components
/// with zero responsibility mass fall back to the prior.
pub fn m_step_map(
    data: &BoundedDataset,
    resp: &Responsibilities,
    prior: &MapPrior,
) -> Result<MoGParams> {
    let k = resp.k();
    if prior.dirichlet_alpha.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: prior.dirichlet_alpha.len(),
        });
    }
    if prior.s0.nrows() != data.d() {
        return Err(Error::DimensionMismatch {
            expected: data.d(),
            found: prior.s0.nrows(),
        });
    }
    let stats = component_stats(data, resp, Exec::default())?;
    Ok(map_from_stats(&stats, data.n() as f64, prior))
}

pub(crate) fn map_from_stats(stats: &[ComponentStats], n: f64, prior: &MapPrior) -> MoGParams {
    let k = stats.len();
    let d = prior.s0.nrows() as f64;
    let alpha_sum: f64 = prior.dirichlet_alpha.iter().sum();
    let denom = n + alpha_sum - k as f64;
    let weights = stats
        .iter()
        .zip(&prior.dirichlet_alpha)
        .map(|(s, a)| (s.count + a - 1.0) / denom)
        .collect();
    let means = stats
        .iter()
        .map(|s| &s.sum / (s.count + prior.kappa0))
        .collect();
    let covariances = stats
        .iter()
        .map(|s| {
            let mu = s.mean();
            let shrink = prior.kappa0 * s.count / (prior.kappa0 + s.count);
            let num = &prior.s0 + &s.scatter + (&mu * mu.transpose()) * shrink;
            floor_cov(num / (prior.nu0 + s.count + d + 2.0))
        })
        .collect();
    MoGParams {
        weights,
        means,
        covariances,
    }
}

pub fn m_step(
    data: &BoundedDataset,
    resp: &Responsibilities,
    estimator: Estimator,
    prior: &MapPrior,
) -> Result<MoGParams> {
    match estimator {
        Estimator::Mle => m_step_mle(data, resp),
        Estimator::Map => m_step_map(data, resp, prior),
    }
}

/// Total log-likelihood Σ_i log Σ_k π_k N(x_i | μ_k, Σ_k).
pub fn log_likelihood(data: &BoundedDataset, params: &MoGParams) -> Result<f64> {
    log_likelihood_with(data, params, Exec::default())
}

pub fn log_likelihood_with(data: &BoundedDataset, params: &MoGParams, exec: Exec) -> Result<f64> {
    check_dims(data, params)?;
    let dens = params.densities()?;
    let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();
    let k = params.k();
    let d = data.d();
    let n = data.n();
    let chunks = n.div_ceil(ROW_CHUNK);
    let partial = exec.map(chunks, |c| {
        let mut scratch = vec![0.0; d];
        let mut logp = vec![0.0; k];
        let mut acc = 0.0;
        for i in c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(n) {
            let x = data.row(i);
            for j in 0..k {
                logp[j] = log_w[j] + dens[j].ln_pdf(x, &mut scratch);
            }
            acc += linalg::log_sum_exp(&logp);
        }
        acc
    });
    Ok(partial.iter().sum())
}

/// Log-likelihood divided by N.
pub fn mean_log_likelihood(data: &BoundedDataset, params: &MoGParams) -> Result<f64> {
    Ok(log_likelihood(data, params)? / data.n() as f64)
}

/// Starting point for EM.
#[derive(Debug, Clone)]
pub enum Init {
    /// k-means++ seeding of the means on the data, the global covariance
    /// for every component and uniform weights. Reads the data, so it is
    /// not private.
    KMeansPlusPlus,
    /// Means uniform in the unit ball, covariance I/(d+2) (the covariance
    /// of the uniform distribution on the ball) and uniform weights. Does
    /// not look at the data.
    RandomBall,
    Given(MoGParams),
}

pub fn initialize<R: Rng + ?Sized>(
    data: &BoundedDataset,
    k: usize,
    init: &Init,
    rng: &mut R,
) -> Result<MoGParams> {
    if k == 0 {
        return Err(Error::Empty("k must be at least 1"));
    }
    let d = data.d();
    match init {
        Init::Given(p) => {
            check_dims(data, p)?;
            if p.k() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    found: p.k(),
                });
            }
            Ok(p.clone())
        }
        Init::RandomBall => {
            let means = (0..k)
                .map(|_| DVector::from_vec(uniform_in_ball(d, rng)))
                .collect();
            let cov = DMatrix::identity(d, d) / (d as f64 + 2.0);
            Ok(MoGParams {
                weights: vec![1.0 / k as f64; k],
                means,
                covariances: vec![cov; k],
            })
        }
        Init::KMeansPlusPlus => {
            let centers = kmeans_pp(data, k, rng);
            let cov = global_covariance(data);
            Ok(MoGParams {
                weights: vec![1.0 / k as f64; k],
                means: centers.into_iter().map(DVector::from_vec).collect(),
                covariances: vec![cov; k],
            })
        }
    }
}

pub(crate) fn uniform_in_ball<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::data::norm(&g);
        if n > 0.0 {
            let r = rng.random::<f64>().powf(1.0 / d as f64);
            return g.iter().map(|v| v * r / n).collect();
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp<R: Rng + ?Sized>(data: &BoundedDataset, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = data.n();
    let mut centers = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut best: Vec<f64> = data.rows().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let idx = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in best.iter().enumerate() {
                if t < *w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = data.row(idx).to_vec();
        for (b, x) in best.iter_mut().zip(data.rows()) {
            *b = b.min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

/// Sample covariance of the whole dataset, floored.
pub(crate) fn global_covariance(data: &BoundedDataset) -> DMatrix<f64> {
    let n = data.n();
    let gamma = vec![1.0; n];
    let resp = Responsibilities::from_validated(gamma, 1);
    let s = component_stats(data, &resp, Exec::Sequential)
        .expect("shapes agree")
        .remove(0);
    floor_cov(s.scatter / n as f64)
}

/// Result of a plain EM run.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: MoGParams,
    /// Total log-likelihood of the initial parameters followed by the value
    /// after each iteration.
    pub log_likelihoods: Vec<f64>,
    /// Components re-seeded after collapsing, as (iteration, component).
    pub reseeded: Vec<(usize, usize)>,
}

/// Runs exactly `iters` EM iterations (no early stopping).
///
/// An MLE component whose mass drops to the count floor gets its mean
/// re-seeded at a random data point with the global covariance, so the
/// number of components stays fixed.
pub fn fit_em<R: Rng + ?Sized>(
    data: &BoundedDataset,
    k: usize,
    iters: usize,
    estimator: Estimator,
    init: &Init,
    rng: &mut R,
) -> Result<EmFit> {
    if data.n() < k {
        return Err(Error::TooFewPoints {
            n: data.n(),
            needed: k,
        });
    }
    let prior = MapPrior::default_for(k, data.d());
    let mut params = initialize(data, k, init, rng)?;
    let mut lls = vec![log_likelihood(data, &params)?];
    let mut reseeded = Vec::new();
    let n = data.n() as f64;
    for it in 0..iters {
        let resp = e_step(data, &params)?;
        let stats = component_stats(data, &resp, Exec::default())?;
        params = match estimator {
            Estimator::Map => map_from_stats(&stats, n, &prior),
            Estimator::Mle => {
                let degenerate: Vec<usize> = stats
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.count <= COUNT_FLOOR_FRACTION * n)
                    .map(|(k, _)| k)
                    .collect();
                if degenerate.is_empty() {
                    mle_from_stats(&stats, n)
                } else {
                    reseed(data, &stats, &degenerate, rng, it, &mut reseeded)
                }
            }
        };
        lls.push(log_likelihood(data, &params)?);
    }
    Ok(EmFit {
        params,
        log_likelihoods: lls,
        reseeded,
    })
}

fn reseed<R: Rng + ?Sized>(
    data: &BoundedDataset,
    stats: &[ComponentStats],
    degenerate: &[usize],
    rng: &mut R,
    iteration: usize,
    log: &mut Vec<(usize, usize)>,
) -> MoGParams {
    let n = data.n() as f64;
    let global = global_covariance(data);
    let mut weights = Vec::with_capacity(stats.len());
    let mut means = Vec::with_capacity(stats.len());
    let mut covariances = Vec::with_capacity(stats.len());
    for (k, s) in stats.iter().enumerate() {
        if degenerate.contains(&k) {
            log.push((iteration, k));
            weights.push(1.0 / n);
            means.push(DVector::from_column_slice(
                data.row(rng.random_range(0..data.n())),
            ));
            covariances.push(global.clone());
        } else {
            weights.push(s.count / n);
            means.push(s.mean());
            covariances.push(floor_cov(&s.scatter / s.count));
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    MoGParams {
        weights,
        means,
        covariances,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{preprocess, RowMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ds(rows: &[&[f64]]) -> BoundedDataset {
        BoundedDataset::new(RowMatrix::from_rows(rows).unwrap()).unwrap()
    }

    fn scalar_params(w: &[f64], mu: &[f64], var: &[f64]) -> MoGParams {
        MoGParams::new(
            w.to_vec(),
            mu.iter().map(|m| DVector::from_element(1, *m)).collect(),
            var.iter().map(|v| DMatrix::from_element(1, 1, *v)).collect(),
        )
        .unwrap()
    }

    // independent scalar normal pdf
    fn npdf(x: f64, mu: f64, var: f64) -> f64 {
        (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    fn random_data(n: usize, d: usize, seed: u64) -> BoundedDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let shift = if i % 2 == 0 { 2.0 } else { -2.0 };
                (0..d)
                    .map(|_| shift + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        preprocess(&RowMatrix::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn single_component_takes_everything() {
        let data = ds(&[&[0.1], &[-0.7], &[0.3]]);
        let r = e_step(&data, &scalar_params(&[1.0], &[0.0], &[1.0])).unwrap();
        for i in 0..3 {
            assert_eq!(r.row(i), &[1.0]);
        }
        assert_eq!(r.counts(), &[3.0]);
    }

    #[test]
    fn symmetric_point_splits_evenly() {
        let data = ds(&[&[0.0]]);
        let r = e_step(&data, &scalar_params(&[0.5, 0.5], &[-0.5, 0.5], &[0.2, 0.2])).unwrap();
        assert_eq!(r.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn responsibilities_match_density_ratio() {
        let data = ds(&[&[0.5]]);
        let r = e_step(&data, &scalar_params(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 1.0])).unwrap();
        let (a, b) = (0.5 * npdf(0.5, -1.0, 1.0), 0.5 * npdf(0.5, 1.0, 1.0));
        assert!((r.get(0, 0) - a / (a + b)).abs() < 1e-15);
        // 1 / (1 + e)
        assert!((r.get(0, 0) - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn singular_covariance_names_component() {
        let data = ds(&[&[0.5, 0.0]]);
        let p = MoGParams::new_unchecked(
            vec![0.5, 0.5],
            vec![DVector::zeros(2), DVector::zeros(2)],
            vec![DMatrix::identity(2, 2), DMatrix::zeros(2, 2)],
        )
        .unwrap();
        assert!(matches!(
            e_step(&data, &p),
            Err(Error::SingularCovariance { component: 1 })
        ));
        assert!(matches!(
            log_likelihood(&data, &p),
            Err(Error::SingularCovariance { component: 1 })
        ));
    }

    #[test]
    fn mle_sample_moments() {
        let data = ds(&[&[0.5], &[-0.5]]);
        let r = Responsibilities::one_hot(&[0, 0], 1).unwrap();
        let p = m_step_mle(&data, &r).unwrap();
        assert_eq!(p.weights(), &[1.0]);
        assert_eq!(p.means()[0][0], 0.0);
        assert_eq!(p.covariances()[0][(0, 0)], 0.25);
    }

    #[test]
    fn empty_cluster_is_degenerate() {
        let data = ds(&[&[0.5], &[-0.5], &[0.1]]);
        let r = Responsibilities::one_hot(&[0, 0, 0], 2).unwrap();
        assert!(matches!(
            m_step_mle(&data, &r),
            Err(Error::DegenerateComponent { component: 1, .. })
        ));
    }

    #[test]
    fn mle_matches_direct_summation() {
        let data = random_data(10, 2, 7);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut g = Vec::new();
        for _ in 0..10 {
            let a: f64 = rng.random();
            g.extend_from_slice(&[a, 1.0 - a]);
        }
        let r = Responsibilities::from_rows(g.clone(), 2).unwrap();
        let p = m_step_mle(&data, &r).unwrap();
        for k in 0..2 {
            let nk: f64 = (0..10).map(|i| g[2 * i + k]).sum();
            let mut mu = [0.0; 2];
            for i in 0..10 {
                for j in 0..2 {
                    mu[j] += g[2 * i + k] * data.row(i)[j] / nk;
                }
            }
            let mut cov = [[0.0; 2]; 2];
            for i in 0..10 {
                let x = data.row(i);
                for a in 0..2 {
                    for b in 0..2 {
                        cov[a][b] += g[2 * i + k] * (x[a] - mu[a]) * (x[b] - mu[b]) / nk;
                    }
                }
            }
            assert!((p.weights()[k] - nk / 10.0).abs() < 1e-12);
            for a in 0..2 {
                assert!((p.means()[k][a] - mu[a]).abs() < 1e-10);
                for b in 0..2 {
                    assert!((p.covariances()[k][(a, b)] - cov[a][b]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn map_keeps_prior_mass_on_empty_component() {
        let data = ds(&[&[0.5], &[-0.5], &[0.1]]);
        let r = Responsibilities::one_hot(&[0, 0, 0], 2).unwrap();
        let p = m_step_map(&data, &r, &MapPrior::default_for(2, 1)).unwrap();
        // (0 + 2 - 1) / (3 + 4 - 2)
        assert!((p.weights()[1] - 1.0 / 5.0).abs() < 1e-15);
        p.check_invariants(PSD_FLOOR).unwrap();
    }

    #[test]
    fn map_single_point_at_origin() {
        let data = ds(&[&[0.0]]);
        let r = Responsibilities::one_hot(&[0], 1).unwrap();
        let p = m_step_map(&data, &r, &MapPrior::default_for(1, 1)).unwrap();
        // S0 / (nu0 + N_k + d + 2) with nu0 = 3, N_k = 1, d = 1
        assert!((p.covariances()[0][(0, 0)] - 0.1 / 7.0).abs() < 1e-15);
        assert_eq!(p.means()[0][0], 0.0);
        assert_eq!(p.weights(), &[1.0]);
    }

    #[test]
    fn map_approaches_mle_for_large_n() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..100_000)
            .map(|_| vec![0.3 + 0.05 * rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let data = preprocess(&RowMatrix::from_rows(&rows).unwrap()).unwrap();
        let r = Responsibilities::one_hot(&vec![0; data.n()], 1).unwrap();
        let a = m_step_mle(&data, &r).unwrap();
        let b = m_step_map(&data, &r, &MapPrior::default_for(1, 1)).unwrap();
        let rel = ((a.means()[0][0] - b.means()[0][0]) / a.means()[0][0]).abs();
        assert!(rel < 1e-4, "{rel}");
    }

    #[test]
    fn loglik_standard_normal_at_mode() {
        let data = ds(&[&[0.0]]);
        let ll = log_likelihood(&data, &scalar_params(&[1.0], &[0.0], &[1.0])).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn loglik_is_additive_over_duplicates() {
        let data = random_data(30, 2, 1);
        let p = initialize(&data, 2, &Init::KMeansPlusPlus, &mut ChaCha20Rng::seed_from_u64(0))
            .unwrap();
        let mut idx: Vec<usize> = (0..30).collect();
        idx.extend(0..30);
        let doubled = data.subset(&idx);
        let a = log_likelihood(&data, &p).unwrap();
        let b = log_likelihood(&doubled, &p).unwrap();
        assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn loglik_matches_density_oracle() {
        let data = random_data(25, 1, 5);
        let p = scalar_params(&[0.3, 0.7], &[-0.4, 0.2], &[0.05, 0.2]);
        let mut oracle = 0.0;
        for x in data.rows() {
            let dens: f64 = (0..2)
                .map(|k| p.weights()[k] * npdf(x[0], p.means()[k][0], p.covariances()[k][(0, 0)]))
                .sum();
            oracle += dens.ln();
        }
        let ll = log_likelihood(&data, &p).unwrap();
        assert!((ll - oracle).abs() < 1e-10, "{ll} vs {oracle}");
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let data = random_data(2000, 3, 11);
        let p = initialize(&data, 3, &Init::KMeansPlusPlus, &mut ChaCha20Rng::seed_from_u64(1))
            .unwrap();
        let a = e_step_with(&data, &p, Exec::Sequential).unwrap();
        let b = e_step_with(&data, &p, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            log_likelihood_with(&data, &p, Exec::Sequential).unwrap(),
            log_likelihood_with(&data, &p, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn em_runs_exact_iteration_count_and_is_monotone() {
        let data = random_data(200, 2, 21);
        let fit = fit_em(
            &data,
            2,
            15,
            Estimator::Mle,
            &Init::KMeansPlusPlus,
            &mut ChaCha20Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(fit.log_likelihoods.len(), 16);
        for w in fit.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
        fit.params.check_invariants(PSD_FLOOR).unwrap();
    }

    #[test]
    fn random_ball_init_is_data_independent() {
        let a = random_data(50, 2, 1);
        let b = random_data(80, 2, 2);
        let pa = initialize(&a, 3, &Init::RandomBall, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        let pb = initialize(&b, 3, &Init::RandomBall, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        assert_eq!(pa, pb);
        pa.check_invariants(PSD_FLOOR).unwrap();
    }

    #[test]
    fn too_few_points() {
        let data = ds(&[&[0.1]]);
        let r = fit_em(&data, 2, 1, Estimator::Map, &Init::RandomBall, &mut ChaCha20Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::TooFewPoints { .. })));
    }
}
