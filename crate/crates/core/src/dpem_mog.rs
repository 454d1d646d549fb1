//! Differentially private EM for Gaussian mixtures.
//!
//! Each of the J iterations runs an ordinary E-step against the previous
//! *released* parameters, computes the MLE or MAP update, and releases it
//! through three mechanisms: the weights (Laplace or Gaussian), each mean
//! (Laplace or Gaussian) and each covariance (Analyze Gauss). The noised
//! weights give the noised counts Ñ_k = N·π̃_k that set the mean and
//! covariance sensitivities. Responsibilities are never released.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::accountant::{self, Calibration, CompositionPlan, Method, PrivacyBudget, Scenario};
use crate::data::BoundedDataset;
use crate::error::{Error, Result};
use crate::mechanisms::{
    self, AccountingTrace, MechanismSpec, Target, TraceRecord,
};
use crate::mog::{
    self, ComponentStats, Estimator, Init, MapPrior, MoGParams, COUNT_FLOOR_FRACTION, PSD_FLOOR,
};
use crate::noise::{NoiseSource, RngNoise};
use crate::par::Exec;
use crate::sensitivity;

#[derive(Debug, Clone)]
pub struct DpEmConfig {
    pub k: usize,
    pub iters: usize,
    pub total: PrivacyBudget,
    pub delta_i: f64,
    pub scenario: Scenario,
    pub method: Method,
    pub estimator: Estimator,
    /// `None` uses [`MapPrior::default_for`].
    pub prior: Option<MapPrior>,
    /// Must not read the data for the run to be private.
    pub init: Init,
    pub psd_floor: f64,
    pub lambda_max: u32,
    pub seed: u64,
    pub exec: Exec,
}

impl DpEmConfig {
    /// GGG, zCDP, MAP, δ_i = 1e-6, random-ball initialization.
    pub fn new(k: usize, iters: usize, total: PrivacyBudget) -> Self {
        Self {
            k,
            iters,
            total,
            delta_i: 1e-6,
            scenario: Scenario::Ggg,
            method: Method::Zcdp,
            estimator: Estimator::Map,
            prior: None,
            init: Init::RandomBall,
            psd_floor: PSD_FLOOR,
            lambda_max: accountant::DEFAULT_LAMBDA_MAX,
            seed: 0,
            exec: Exec::default(),
        }
    }

    pub fn plan(&self) -> CompositionPlan {
        CompositionPlan::mog(self.scenario, self.iters, self.k, self.delta_i, self.method)
            .with_lambda_max(self.lambda_max)
    }
}

#[derive(Debug, Clone)]
pub struct DpEmFit {
    pub params: MoGParams,
    pub trace: AccountingTrace,
    pub calibration: Calibration,
}

/// Runs DP-EM with one ChaCha20 stream seeded from `cfg.seed`, used first
/// for initialization and then for every noise draw.
pub fn run_dpem_mog(data: &BoundedDataset, cfg: &DpEmConfig) -> Result<DpEmFit> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let init = mog::initialize(data, cfg.k, &cfg.init, &mut rng)?;
    run_dpem_mog_from(data, cfg, init, &mut RngNoise(rng))
}

/// DP-EM from given initial parameters with an explicit noise source.
pub fn run_dpem_mog_from(
    data: &BoundedDataset,
    cfg: &DpEmConfig,
    init: MoGParams,
    noise: &mut dyn NoiseSource,
) -> Result<DpEmFit> {
    let (n, d, k) = (data.n(), data.d(), cfg.k);
    if k == 0 || cfg.iters == 0 {
        return Err(Error::InvalidParams("k and iters must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { n, needed: k });
    }
    if init.k() != k || init.d() != d {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: init.k(),
        });
    }
    let calibration = accountant::calibrate(&cfg.plan(), &cfg.total)?;
    let eps_i = calibration.eps_i;
    let delta_i = cfg.delta_i;
    let prior = cfg
        .prior
        .clone()
        .unwrap_or_else(|| MapPrior::default_for(k, d));
    let nf = n as f64;
    let (mean_shift, cov_shift) = match cfg.estimator {
        Estimator::Mle => (0.0, 0.0),
        Estimator::Map => (prior.kappa0, prior.nu0 + d as f64 + 2.0),
    };

    let vector_spec = |sens: f64| -> Result<MechanismSpec> {
        match cfg.scenario {
            Scenario::Llg => MechanismSpec::laplace(sens, eps_i),
            Scenario::Ggg => MechanismSpec::gaussian(sens, eps_i, delta_i),
        }
    };
    let vector_delta = match cfg.scenario {
        Scenario::Llg => 0.0,
        Scenario::Ggg => delta_i,
    };

    let mut params = init;
    let mut trace = AccountingTrace::new();
    for it in 0..cfg.iters {
        let resp = mog::e_step_with(data, &params, cfg.exec)?;
        let stats = mog::component_stats(data, &resp, cfg.exec)?;
        let est = match cfg.estimator {
            Estimator::Map => mog::map_from_stats(&stats, nf, &prior),
            Estimator::Mle => mle_keeping_previous(&stats, nf, &params),
        };

        let w_spec = vector_spec(sensitivity::weights(nf))?;
        let release = mechanisms::perturb_simplex(est.weights(), &w_spec, noise)?;
        trace.push(it, Target::Weights, w_spec, vector_delta);
        if release.fell_back {
            trace
                .warnings
                .push(format!("iteration {it}: all weights clipped, released uniform"));
        }
        let counts: Vec<(f64, bool)> = release
            .weights
            .iter()
            .map(|w| mechanisms::floor_noised_count(nf * w))
            .collect();
        for (j, (_, floored)) in counts.iter().enumerate() {
            if *floored {
                trace.warnings.push(format!(
                    "iteration {it}: noised count of component {j} floored at {}",
                    mechanisms::NOISED_COUNT_FLOOR
                ));
            }
        }

        let mut means = Vec::with_capacity(k);
        for (j, &(count, floored)) in counts.iter().enumerate() {
            let denom = count + mean_shift;
            let sens = match cfg.scenario {
                Scenario::Llg => sensitivity::mean_l1(d, denom),
                Scenario::Ggg => sensitivity::mean_l2(denom),
            };
            let spec = vector_spec(sens)?;
            means.push(mechanisms::perturb_mean(&est.means()[j], &spec, noise)?);
            push_flagged(&mut trace, it, Target::Mean(j), spec, vector_delta, floored);
        }

        let mut covs = Vec::with_capacity(k);
        for (j, &(count, floored)) in counts.iter().enumerate() {
            let spec =
                MechanismSpec::analyze_gauss(sensitivity::covariance(count + cov_shift), eps_i, delta_i)?;
            covs.push(mechanisms::analyze_gauss_perturb(
                &est.covariances()[j],
                &spec,
                noise,
                cfg.psd_floor,
            )?);
            push_flagged(&mut trace, it, Target::Covariance(j), spec, delta_i, floored);
        }

        params = MoGParams::new_unchecked(release.weights, means, covs)?;
    }
    Ok(DpEmFit {
        params,
        trace,
        calibration,
    })
}

fn push_flagged(
    trace: &mut AccountingTrace,
    iteration: usize,
    target: Target,
    spec: MechanismSpec,
    delta: f64,
    floored: bool,
) {
    trace.records.push(TraceRecord {
        iteration,
        target,
        spec,
        delta,
        floored,
    });
}

/// MLE update; a component with (near) zero responsibility mass keeps its
/// previously released mean and covariance instead of dividing by zero.
/// Those values are already public, so reusing them costs nothing.
fn mle_keeping_previous(stats: &[ComponentStats], n: f64, prev: &MoGParams) -> MoGParams {
    let floor = COUNT_FLOOR_FRACTION * n;
    if stats.iter().all(|s| s.count > floor) {
        return mog::mle_from_stats(stats, n);
    }
    let weights = stats.iter().map(|s| s.count / n).collect();
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(stats.len());
    let mut covs: Vec<DMatrix<f64>> = Vec::with_capacity(stats.len());
    for (j, s) in stats.iter().enumerate() {
        if s.count > floor {
            means.push(s.mean());
            covs.push(crate::linalg::clamp_eigenvalues(&(&s.scatter / s.count), PSD_FLOOR));
        } else {
            means.push(prev.means()[j].clone());
            covs.push(prev.covariances()[j].clone());
        }
    }
    MoGParams::new_unchecked(weights, means, covs).expect("shapes come from prev")
}
