//! Sweeps over (method, ε, fold, seed) cells with a non-private baseline
//! per (fold, seed).
//!
//! Every cell owns a ChaCha20 stream derived from the master seed and its
//! replicate index (fold, seed). All methods and budgets of one replicate
//! therefore share the same initialization and the same underlying noise
//! draws, which makes the curves directly comparable. Cells are evaluated
//! with [`Exec`] and collected in a fixed order, so the output does not
//! depend on the number of threads.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::accountant::{self, CompositionPlan, Method, PrivacyBudget, Scenario};
use crate::data::BoundedDataset;
use crate::dpem_mog::{run_dpem_mog_from, DpEmConfig};
use crate::error::{Error, Result};
use crate::fa::{fa_log_likelihood, perturb_second_moment, run_fa_em, second_moment};
use crate::io::{cv_split, BaselineResult, ExperimentResult, TraceSummary};
use crate::kmeans::{self, LloydComposition};
use crate::mechanisms::{AccountingTrace, MechanismKind};
use crate::mog::{self, Estimator, Init, PSD_FLOOR};
use crate::noise::RngNoise;
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KMeansVariant {
    /// Centroid perturbation with zCDP accounting.
    DpEm,
    DplloydLinear,
    DplloydZcdp,
}

impl KMeansVariant {
    pub const ALL: [KMeansVariant; 3] = [
        KMeansVariant::DpEm,
        KMeansVariant::DplloydZcdp,
        KMeansVariant::DplloydLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KMeansVariant::DpEm => "dpem",
            KMeansVariant::DplloydLinear => "dplloyd-linear",
            KMeansVariant::DplloydZcdp => "dplloyd-zcdp",
        }
    }

    /// Composition method the variant's trace is audited with.
    pub fn method(self) -> Method {
        match self {
            KMeansVariant::DplloydLinear => Method::Linear,
            _ => Method::Zcdp,
        }
    }
}

impl std::str::FromStr for KMeansVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpem" => Ok(KMeansVariant::DpEm),
            "dplloyd-linear" => Ok(KMeansVariant::DplloydLinear),
            "dplloyd-zcdp" => Ok(KMeansVariant::DplloydZcdp),
            other => Err(Error::InvalidParams(format!("unknown k-means variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Mog {
        k: usize,
        iters: usize,
        scenario: Scenario,
        estimator: Estimator,
    },
    Fa {
        q: usize,
        iters: usize,
    },
    KMeans {
        k: usize,
        iters: usize,
        variants: Vec<KMeansVariant>,
    },
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Mog { .. } => "mog",
            ModelSpec::Fa { .. } => "fa",
            ModelSpec::KMeans { .. } => "kmeans",
        }
    }

    fn metric_name(&self) -> &'static str {
        match self {
            ModelSpec::KMeans { .. } => "nicv",
            _ => "test_loglik",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub model: ModelSpec,
    pub eps_list: Vec<f64>,
    pub delta: f64,
    pub delta_i: f64,
    /// Ignored for k-means, whose variants fix their own composition.
    pub methods: Vec<Method>,
    pub folds: usize,
    pub seeds: usize,
    pub master_seed: u64,
    pub lambda_max: u32,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    pub results: Vec<ExperimentResult>,
    pub baseline: Vec<BaselineResult>,
}

/// RNG of replicate `replicate` under `master_seed`.
pub fn cell_rng(master_seed: u64, replicate: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(replicate as u64);
    rng
}

#[derive(Debug, Clone, Copy)]
enum Arm {
    Method(Method),
    Variant(KMeansVariant),
}

impl Arm {
    fn name(self) -> &'static str {
        match self {
            Arm::Method(m) => m.name(),
            Arm::Variant(v) => v.name(),
        }
    }

    fn audit_method(self) -> Method {
        match self {
            Arm::Method(m) => m,
            Arm::Variant(v) => v.method(),
        }
    }
}

struct Cell {
    arm: Arm,
    epsilon: f64,
    fold: usize,
    seed: usize,
}

struct Split {
    train: BoundedDataset,
    test: BoundedDataset,
}

fn summarize_trace(trace: &AccountingTrace) -> TraceSummary {
    TraceSummary {
        mechanisms: trace.len(),
        laplace: trace.count_kind(MechanismKind::Laplace),
        gaussian: trace.count_kind(MechanismKind::Gaussian),
        analyze_gauss: trace.count_kind(MechanismKind::AnalyzeGauss),
        floored: trace.floored_count(),
        warnings: trace.warnings.len(),
    }
}

/// Runs every cell and every baseline replicate.
pub fn run_sweep(data: &BoundedDataset, cfg: &SweepConfig, exec: Exec) -> Result<SweepOutput> {
    if cfg.eps_list.is_empty() {
        return Err(Error::Empty("no epsilon values"));
    }
    if cfg.seeds == 0 {
        return Err(Error::Empty("seeds must be at least 1"));
    }
    let arms: Vec<Arm> = match &cfg.model {
        ModelSpec::KMeans { variants, .. } => variants.iter().map(|v| Arm::Variant(*v)).collect(),
        _ => cfg.methods.iter().map(|m| Arm::Method(*m)).collect(),
    };
    if arms.is_empty() {
        return Err(Error::Empty("no methods"));
    }
    for &e in &cfg.eps_list {
        PrivacyBudget::new(e, cfg.delta)?;
    }
    let splits: Vec<Split> = cv_split(data.n(), cfg.folds, cfg.master_seed)?
        .into_iter()
        .map(|f| Split {
            train: data.subset(&f.train),
            test: data.subset(&f.test),
        })
        .collect();

    let mut cells = Vec::new();
    for &arm in &arms {
        for &epsilon in &cfg.eps_list {
            for fold in 0..cfg.folds {
                for seed in 0..cfg.seeds {
                    cells.push(Cell {
                        arm,
                        epsilon,
                        fold,
                        seed,
                    });
                }
            }
        }
    }
    let inner = if exec.is_parallel() {
        Exec::Sequential
    } else {
        exec
    };
    let results = exec.try_map(cells.len(), |i| run_cell(&splits, cfg, &cells[i], inner))?;
    let replicates = cfg.folds * cfg.seeds;
    let baseline = exec.try_map(replicates, |r| {
        run_baseline(&splits, cfg, r / cfg.seeds, r % cfg.seeds, inner)
    })?;
    Ok(SweepOutput { results, baseline })
}

fn run_cell(splits: &[Split], cfg: &SweepConfig, cell: &Cell, exec: Exec) -> Result<ExperimentResult> {
    let start = Instant::now();
    let split = &splits[cell.fold];
    let total = PrivacyBudget::new(cell.epsilon, cfg.delta)?;
    let replicate = cell.fold * cfg.seeds + cell.seed;
    let mut rng = cell_rng(cfg.master_seed, replicate);
    let (metric, trace, eps_i, scenario, estimator) = match (&cfg.model, cell.arm) {
        (
            ModelSpec::Mog {
                k,
                iters,
                scenario,
                estimator,
            },
            Arm::Method(method),
        ) => {
            let init = mog::initialize(&split.train, *k, &Init::RandomBall, &mut rng)?;
            let mut dp = DpEmConfig::new(*k, *iters, total);
            dp.delta_i = cfg.delta_i;
            dp.scenario = *scenario;
            dp.method = method;
            dp.estimator = *estimator;
            dp.lambda_max = cfg.lambda_max;
            dp.exec = exec;
            let fit = run_dpem_mog_from(&split.train, &dp, init, &mut RngNoise(rng))?;
            let ll = mog::log_likelihood_with(&split.test, &fit.params, exec)? / split.test.n() as f64;
            (
                ll,
                fit.trace,
                fit.calibration.eps_i,
                Some(scenario.to_string()),
                Some(format!("{estimator:?}").to_lowercase()),
            )
        }
        (ModelSpec::Fa { q, iters }, Arm::Method(method)) => {
            let plan = CompositionPlan::single_gaussian(cfg.delta_i, method)
                .with_lambda_max(cfg.lambda_max);
            let cal = accountant::calibrate(&plan, &total)?;
            let per = PrivacyBudget {
                epsilon: cal.eps_i,
                delta: cfg.delta_i,
            };
            let mom = second_moment(&split.train);
            let (noisy, trace) = perturb_second_moment(&mom, &per, &mut RngNoise(rng), PSD_FLOOR)?;
            let fit = run_fa_em(&noisy, *q, *iters)?;
            let ll = fa_log_likelihood(&second_moment(&split.test), &fit.params)?;
            (ll, trace, cal.eps_i, None, None)
        }
        (ModelSpec::KMeans { k, iters, .. }, Arm::Variant(v)) => {
            let init = kmeans::random_centers(*k, split.train.d(), &mut rng);
            let mut noise = RngNoise(rng);
            let fit = match v {
                KMeansVariant::DpEm => {
                    kmeans::dpem_kmeans(&split.train, init, *iters, &total, &mut noise, exec)?
                }
                KMeansVariant::DplloydLinear => kmeans::dplloyd(
                    &split.train,
                    init,
                    *iters,
                    &total,
                    LloydComposition::Linear,
                    &mut noise,
                    exec,
                )?,
                KMeansVariant::DplloydZcdp => kmeans::dplloyd(
                    &split.train,
                    init,
                    *iters,
                    &total,
                    LloydComposition::Zcdp,
                    &mut noise,
                    exec,
                )?,
            };
            let v = kmeans::nicv_with(&split.train, &fit.clustering.centers, exec)?;
            (v, fit.trace, fit.eps_i, None, None)
        }
        _ => unreachable!("arms are built from the model"),
    };
    let audit = accountant::audit_trace(&trace, cell.arm.audit_method(), &total, cfg.lambda_max)?;
    Ok(ExperimentResult {
        model: cfg.model.name().into(),
        method: cell.arm.name().into(),
        scenario,
        estimator,
        epsilon: cell.epsilon,
        delta: cfg.delta,
        delta_i: cfg.delta_i,
        fold: cell.fold,
        seed: cell.seed,
        metric_name: cfg.model.metric_name().into(),
        metric,
        eps_i,
        trace: summarize_trace(&trace),
        audit_epsilon: audit.epsilon,
        audit_delta: audit.delta,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn run_baseline(
    splits: &[Split],
    cfg: &SweepConfig,
    fold: usize,
    seed: usize,
    exec: Exec,
) -> Result<BaselineResult> {
    let split = &splits[fold];
    let mut rng = cell_rng(cfg.master_seed, fold * cfg.seeds + seed);
    let metric = match &cfg.model {
        ModelSpec::Mog {
            k,
            iters,
            estimator,
            ..
        } => {
            let init = mog::initialize(&split.train, *k, &Init::RandomBall, &mut rng)?;
            let fit = mog::fit_em(&split.train, *k, *iters, *estimator, &Init::Given(init), &mut rng)?;
            mog::log_likelihood_with(&split.test, &fit.params, exec)? / split.test.n() as f64
        }
        ModelSpec::Fa { q, iters } => {
            let fit = run_fa_em(&second_moment(&split.train), *q, *iters)?;
            fa_log_likelihood(&second_moment(&split.test), &fit.params)?
        }
        ModelSpec::KMeans { k, iters, .. } => {
            let init = kmeans::random_centers(*k, split.train.d(), &mut rng);
            let (c, _) = kmeans::lloyd(&split.train, init, *iters, exec)?;
            kmeans::nicv_with(&split.train, &c.centers, exec)?
        }
    };
    Ok(BaselineResult {
        model: cfg.model.name().into(),
        fold,
        seed,
        metric_name: cfg.model.metric_name().into(),
        metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth_mog;

    fn cfg(model: ModelSpec) -> SweepConfig {
        SweepConfig {
            model,
            eps_list: vec![0.5, 2.0],
            delta: 1e-4,
            delta_i: 1e-6,
            methods: vec![Method::Linear, Method::Zcdp],
            folds: 3,
            seeds: 2,
            master_seed: 7,
            lambda_max: 64,
        }
    }

    #[test]
    fn sweep_is_thread_independent() {
        let data = synth_mog(600, 2, 2, 4.0, 1).unwrap().data;
        let c = cfg(ModelSpec::Mog {
            k: 2,
            iters: 3,
            scenario: Scenario::Ggg,
            estimator: Estimator::Map,
        });
        let a = run_sweep(&data, &c, Exec::Sequential).unwrap();
        let b = run_sweep(&data, &c, Exec::Parallel).unwrap();
        assert_eq!(a.results.len(), 2 * 2 * 3 * 2);
        assert_eq!(a.baseline.len(), 6);
        for (x, y) in a.results.iter().zip(&b.results) {
            assert_eq!(x.metric, y.metric);
            assert_eq!(x.audit_epsilon, y.audit_epsilon);
        }
        assert_eq!(a.baseline, b.baseline);
    }

    #[test]
    fn fa_and_kmeans_sweeps_run() {
        let data = synth_mog(400, 4, 3, 4.0, 2).unwrap().data;
        let fa = run_sweep(&data, &cfg(ModelSpec::Fa { q: 1, iters: 50 }), Exec::default()).unwrap();
        assert!(fa.results.iter().all(|r| r.trace.mechanisms == 1));
        let km = run_sweep(
            &data,
            &cfg(ModelSpec::KMeans {
                k: 3,
                iters: 4,
                variants: KMeansVariant::ALL.to_vec(),
            }),
            Exec::default(),
        )
        .unwrap();
        assert_eq!(km.results.len(), 3 * 2 * 3 * 2);
        assert!(km.results.iter().all(|r| r.audit_epsilon <= r.epsilon + 1e-9));
    }
}
