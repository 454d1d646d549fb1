//! k-means: plain Lloyd, DPLloyd (noisy counts and coordinate sums) and
//! centroid perturbation with zCDP accounting, plus the NICV metric.
//!
//! All private variants start from centers drawn uniformly in the unit
//! ball, so initialization never looks at the data.

use rand::Rng;

use crate::accountant::{self, CompositionPlan, Method, PrivacyBudget};
use crate::data::BoundedDataset;
use crate::error::{Error, Result};
use crate::mechanisms::{self, AccountingTrace, MechanismSpec, Target, TraceRecord};
use crate::mog::{sq_dist, uniform_in_ball};
use crate::noise::NoiseSource;
use crate::par::Exec;
use crate::sensitivity;

const ASSIGN_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    /// Index of the nearest center for every row, at output time.
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub clustering: Clustering,
    pub trace: AccountingTrace,
    /// Per-mechanism ε used by the run (0 for plain Lloyd).
    pub eps_i: f64,
}

fn check_centers(data: &BoundedDataset, centers: &[Vec<f64>]) -> Result<()> {
    if centers.is_empty() {
        return Err(Error::Empty("no centers"));
    }
    for c in centers {
        if c.len() != data.d() {
            return Err(Error::DimensionMismatch {
                expected: data.d(),
                found: c.len(),
            });
        }
    }
    Ok(())
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Nearest-center label of every row; ties go to the lower index.
pub fn assign(data: &BoundedDataset, centers: &[Vec<f64>], exec: Exec) -> Vec<usize> {
    let mut out = vec![0usize; data.n()];
    exec.fill_chunks(&mut out, ASSIGN_CHUNK, |ci, chunk| {
        let start = ci * ASSIGN_CHUNK;
        for (off, slot) in chunk.iter_mut().enumerate() {
            *slot = nearest(data.row(start + off), centers).0;
        }
    });
    out
}

/// Normalized intra-cluster variance: (1/N) Σ_i min_k ‖x_i − c_k‖².
pub fn nicv(data: &BoundedDataset, centers: &[Vec<f64>]) -> Result<f64> {
    nicv_with(data, centers, Exec::default())
}

pub fn nicv_with(data: &BoundedDataset, centers: &[Vec<f64>], exec: Exec) -> Result<f64> {
    check_centers(data, centers)?;
    let chunks = data.n().div_ceil(ASSIGN_CHUNK);
    let partial = exec.map(chunks, |ci| {
        let end = ((ci + 1) * ASSIGN_CHUNK).min(data.n());
        (ci * ASSIGN_CHUNK..end)
            .map(|i| nearest(data.row(i), centers).1)
            .sum::<f64>()
    });
    Ok(partial.iter().sum::<f64>() / data.n() as f64)
}

/// Per-cluster counts and coordinate sums under `labels`.
fn cluster_sums(data: &BoundedDataset, labels: &[usize], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = data.d();
    let mut counts = vec![0.0; k];
    let mut sums = vec![vec![0.0; d]; k];
    for (x, &l) in data.rows().zip(labels) {
        counts[l] += 1.0;
        for (s, v) in sums[l].iter_mut().zip(x) {
            *s += v;
        }
    }
    (counts, sums)
}

pub fn random_centers<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..k).map(|_| uniform_in_ball(d, rng)).collect()
}

fn check_run(data: &BoundedDataset, k: usize, iters: usize) -> Result<()> {
    if k == 0 || iters == 0 {
        return Err(Error::InvalidParams("k and iters must be at least 1".into()));
    }
    if data.n() < k {
        return Err(Error::TooFewPoints {
            n: data.n(),
            needed: k,
        });
    }
    Ok(())
}

fn finish(data: &BoundedDataset, centers: Vec<Vec<f64>>, exec: Exec) -> Clustering {
    let assignments = assign(data, &centers, exec);
    Clustering {
        centers,
        assignments,
    }
}

/// Plain Lloyd iterations from the given centers. An empty cluster keeps
/// its center. Returns the clustering and NICV before each iteration and
/// at the end.
pub fn lloyd(
    data: &BoundedDataset,
    init: Vec<Vec<f64>>,
    iters: usize,
    exec: Exec,
) -> Result<(Clustering, Vec<f64>)> {
    check_centers(data, &init)?;
    let k = init.len();
    let mut centers = init;
    let mut history = Vec::with_capacity(iters + 1);
    for _ in 0..iters {
        history.push(nicv_with(data, &centers, exec)?);
        let labels = assign(data, &centers, exec);
        let (counts, sums) = cluster_sums(data, &labels, k);
        for j in 0..k {
            if counts[j] > 0.0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j]).collect();
            }
        }
    }
    history.push(nicv_with(data, &centers, exec)?);
    Ok((finish(data, centers, exec), history))
}

/// Composition used by DPLloyd.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LloydComposition {
    /// ε_i = ε/J.
    Linear,
    /// ε_i from zCDP over J pure ε_i-DP releases.
    Zcdp,
}

/// Per-iteration ε for DPLloyd.
pub fn dplloyd_eps_i(iters: usize, total: &PrivacyBudget, comp: LloydComposition) -> Result<f64> {
    match comp {
        LloydComposition::Linear => Ok(total.epsilon / iters as f64),
        LloydComposition::Zcdp => {
            accountant::zcdp_calibrate(&CompositionPlan::laplace_only(iters, Method::Zcdp), total)
        }
    }
}

/// DPLloyd: every iteration releases the k counts and k·d coordinate sums
/// with Laplace noise of scale (d+1)/ε_i (the joint L1 sensitivity is
/// d+1), then divides. Noised counts are floored at 1.
pub fn dplloyd(
    data: &BoundedDataset,
    init: Vec<Vec<f64>>,
    iters: usize,
    total: &PrivacyBudget,
    comp: LloydComposition,
    noise: &mut dyn NoiseSource,
    exec: Exec,
) -> Result<KMeansFit> {
    check_centers(data, &init)?;
    let k = init.len();
    check_run(data, k, iters)?;
    let d = data.d();
    let eps_i = dplloyd_eps_i(iters, total, comp)?;
    let spec = MechanismSpec::laplace(d as f64 + 1.0, eps_i)?;
    let mut centers = init;
    let mut trace = AccountingTrace::new();
    for it in 0..iters {
        let labels = assign(data, &centers, exec);
        let (counts, sums) = cluster_sums(data, &labels, k);
        let mut floored_any = false;
        for j in 0..k {
            let (count, floored) =
                mechanisms::floor_noised_count(counts[j] + noise.laplace(spec.noise_scale));
            floored_any |= floored;
            centers[j] = sums[j]
                .iter()
                .map(|s| (s + noise.laplace(spec.noise_scale)) / count)
                .collect();
        }
        trace.records.push(TraceRecord {
            iteration: it,
            target: Target::ClusterSums,
            spec,
            delta: 0.0,
            floored: floored_any,
        });
    }
    Ok(KMeansFit {
        clustering: finish(data, centers, exec),
        trace,
        eps_i,
    })
}

/// Centroid perturbation: Lloyd assignment, then per iteration a noised
/// weight vector (Laplace, sensitivity 2/N) giving noised counts
/// Ñ_k = N·π̃_k, and each centroid released with Laplace noise of
/// sensitivity 2√d/Ñ_k. ε_i comes from zCDP over J(k+1) releases. An empty
/// cluster keeps its previous (already released) center.
pub fn dpem_kmeans(
    data: &BoundedDataset,
    init: Vec<Vec<f64>>,
    iters: usize,
    total: &PrivacyBudget,
    noise: &mut dyn NoiseSource,
    exec: Exec,
) -> Result<KMeansFit> {
    check_centers(data, &init)?;
    let k = init.len();
    check_run(data, k, iters)?;
    let (n, d) = (data.n() as f64, data.d());
    let plan = CompositionPlan::laplace_only(iters * (k + 1), Method::Zcdp);
    let eps_i = accountant::zcdp_calibrate(&plan, total)?;
    let w_spec = MechanismSpec::laplace(sensitivity::weights(n), eps_i)?;
    let mut centers = init;
    let mut trace = AccountingTrace::new();
    for it in 0..iters {
        let labels = assign(data, &centers, exec);
        let (counts, sums) = cluster_sums(data, &labels, k);
        let weights: Vec<f64> = counts.iter().map(|c| c / n).collect();
        let release = mechanisms::perturb_simplex(&weights, &w_spec, noise)?;
        trace.push(it, Target::Weights, w_spec, 0.0);
        for j in 0..k {
            let (count, floored) = mechanisms::floor_noised_count(n * release.weights[j]);
            let spec = MechanismSpec::laplace(sensitivity::mean_l1(d, count), eps_i)?;
            let base: Vec<f64> = if counts[j] > 0.0 {
                sums[j].iter().map(|s| s / counts[j]).collect()
            } else {
                centers[j].clone()
            };
            centers[j] = base
                .iter()
                .map(|v| v + noise.laplace(spec.noise_scale))
                .collect();
            trace.records.push(TraceRecord {
                iteration: it,
                target: Target::Centroid(j),
                spec,
                delta: 0.0,
                floored,
            });
        }
    }
    Ok(KMeansFit {
        clustering: finish(data, centers, exec),
        trace,
        eps_i,
    })
}
