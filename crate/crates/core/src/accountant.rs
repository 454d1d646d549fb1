//! Privacy-loss accounting.
//!
//! A run is described by how many Laplace and Gaussian releases it makes,
//! all calibrated from one per-mechanism budget ε_i (and δ_i for the
//! Gaussian ones). Four composition methods turn that into a total
//! (ε, δ): linear, advanced, zCDP and the moments accountant (MA). Each can
//! also be inverted by bisection to find the largest ε_i a total budget
//! allows.
//!
//! Because every Gaussian release uses σ = Δ·sqrt(2 ln(1.25/δ_i))/ε_i, the
//! ratio Δ/σ depends only on (ε_i, δ_i). Accounting therefore never needs
//! the data size or the actual sensitivities.

use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};
use crate::mechanisms::{AccountingTrace, MechanismKind};

/// Default largest moment order searched by the moments accountant.
pub const DEFAULT_LAMBDA_MAX: u32 = 512;

const EPS_I_MIN: f64 = 1e-8;
const EPS_I_MAX: f64 = 1.0 - 1e-8;
const BISECT_REL_TOL: f64 = 1e-12;

/// Total (ε, δ). Also used for computed spends, which may be zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        check_range("epsilon", epsilon, epsilon > 0.0, "> 0")?;
        check_range("delta", delta, delta > 0.0 && delta < 1.0, "0 < delta < 1")?;
        Ok(Self { epsilon, delta })
    }

    /// Both components at most those of `total`, up to `tol`.
    pub fn within(&self, total: &PrivacyBudget, tol: f64) -> bool {
        self.epsilon <= total.epsilon + tol && self.delta <= total.delta + tol
    }
}

/// Per-iteration mechanism assignment for the mixture model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Laplace on weights and means, Gaussian on covariances.
    Llg,
    /// Gaussian on all three.
    Ggg,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "llg" => Ok(Scenario::Llg),
            "ggg" => Ok(Scenario::Ggg),
            other => Err(Error::InvalidParams(format!("unknown scenario {other:?}"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Llg => "llg",
            Scenario::Ggg => "ggg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Linear,
    Advanced,
    Zcdp,
    Ma,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Linear, Method::Advanced, Method::Zcdp, Method::Ma];

    pub fn name(self) -> &'static str {
        match self {
            Method::Linear => "linear",
            Method::Advanced => "advanced",
            Method::Zcdp => "zcdp",
            Method::Ma => "ma",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Method::Linear),
            "advanced" => Ok(Method::Advanced),
            "zcdp" => Ok(Method::Zcdp),
            "ma" | "moments" => Ok(Method::Ma),
            other => Err(Error::InvalidParams(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What one run releases and how it is to be accounted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionPlan {
    /// Number of ε_i-DP Laplace releases.
    pub laplace: usize,
    /// Number of (ε_i, δ_i) Gaussian releases.
    pub gaussian: usize,
    pub delta_i: f64,
    pub method: Method,
    /// δ′ for advanced composition; `None` spends whatever δ the Gaussian
    /// releases leave over.
    pub advanced_slack: Option<f64>,
    pub lambda_max: u32,
}

impl CompositionPlan {
    /// Mixture-model plan: J iterations over K components.
    /// LLG makes J(K+1) Laplace and JK Gaussian releases, GGG J(2K+1)
    /// Gaussian ones.
    pub fn mog(scenario: Scenario, iters: usize, k: usize, delta_i: f64, method: Method) -> Self {
        let (laplace, gaussian) = match scenario {
            Scenario::Llg => (iters * (k + 1), iters * k),
            Scenario::Ggg => (0, iters * (2 * k + 1)),
        };
        Self {
            laplace,
            gaussian,
            delta_i,
            method,
            advanced_slack: None,
            lambda_max: DEFAULT_LAMBDA_MAX,
        }
    }

    /// `count` pure ε_i-DP releases.
    pub fn laplace_only(count: usize, method: Method) -> Self {
        Self {
            laplace: count,
            gaussian: 0,
            delta_i: 0.0,
            method,
            advanced_slack: None,
            lambda_max: DEFAULT_LAMBDA_MAX,
        }
    }

    /// One Gaussian release (for instance the factor-analysis moment).
    pub fn single_gaussian(delta_i: f64, method: Method) -> Self {
        Self {
            laplace: 0,
            gaussian: 1,
            delta_i,
            method,
            advanced_slack: None,
            lambda_max: DEFAULT_LAMBDA_MAX,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_slack(mut self, slack: f64) -> Self {
        self.advanced_slack = Some(slack);
        self
    }

    pub fn with_lambda_max(mut self, lambda_max: u32) -> Self {
        self.lambda_max = lambda_max;
        self
    }

    pub fn total_mechanisms(&self) -> usize {
        self.laplace + self.gaussian
    }

    /// The charges made by a run calibrated at `eps_i`.
    pub fn charges(&self, eps_i: f64) -> Vec<Charge> {
        let mut out = Vec::with_capacity(2);
        if self.laplace > 0 {
            out.push(Charge {
                release: Release::Laplace { epsilon: eps_i },
                count: self.laplace,
            });
        }
        if self.gaussian > 0 {
            out.push(Charge {
                release: Release::Gaussian {
                    ratio: gaussian_ratio(eps_i, self.delta_i),
                    delta: self.delta_i,
                },
                count: self.gaussian,
            });
        }
        out
    }
}

/// Δ/σ of the classical Gaussian mechanism at (ε, δ).
pub fn gaussian_ratio(epsilon: f64, delta: f64) -> f64 {
    epsilon / (2.0 * (1.25 / delta).ln()).sqrt()
}

/// A single release as seen by the accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Release {
    /// ε-DP Laplace mechanism (ε = sensitivity / scale).
    Laplace { epsilon: f64 },
    /// Gaussian mechanism with sensitivity/σ ratio `ratio`, calibrated for
    /// failure probability `delta` in the classical analysis.
    Gaussian { ratio: f64, delta: f64 },
}

impl Release {
    /// ε of this release on its own under pure/approximate DP.
    pub fn epsilon(&self) -> f64 {
        match *self {
            Release::Laplace { epsilon } => epsilon,
            Release::Gaussian { ratio, delta } => ratio * (2.0 * (1.25 / delta).ln()).sqrt(),
        }
    }

    pub fn delta(&self) -> f64 {
        match *self {
            Release::Laplace { .. } => 0.0,
            Release::Gaussian { delta, .. } => delta,
        }
    }

    pub fn rho(&self) -> f64 {
        match *self {
            Release::Laplace { epsilon } => 0.5 * epsilon * epsilon,
            Release::Gaussian { ratio, .. } => 0.5 * ratio * ratio,
        }
    }

    pub fn moment(&self, lambda: f64) -> f64 {
        match *self {
            Release::Laplace { epsilon } => laplace_moment(lambda, epsilon),
            Release::Gaussian { ratio, .. } => gaussian_moment(lambda, ratio, 1.0),
        }
    }
}

/// `count` identical releases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Charge {
    pub release: Release,
    pub count: usize,
}

/// Converts every trace record into a charge of count one.
pub fn trace_charges(trace: &AccountingTrace) -> Vec<Charge> {
    trace
        .records
        .iter()
        .map(|r| {
            let s = &r.spec;
            let release = match s.kind {
                MechanismKind::Laplace => Release::Laplace {
                    epsilon: if s.sensitivity == 0.0 {
                        0.0
                    } else {
                        s.sensitivity / s.noise_scale
                    },
                },
                MechanismKind::Gaussian | MechanismKind::AnalyzeGauss => Release::Gaussian {
                    ratio: if s.sensitivity == 0.0 {
                        0.0
                    } else {
                        s.sensitivity / s.draw_scale()
                    },
                    delta: r.delta,
                },
            };
            Charge { release, count: 1 }
        })
        .collect()
}

fn count_of(charges: &[Charge]) -> f64 {
    charges.iter().map(|c| c.count as f64).sum()
}

fn sum_delta(charges: &[Charge]) -> f64 {
    charges
        .iter()
        .map(|c| c.count as f64 * c.release.delta())
        .sum()
}

// ---------------------------------------------------------------------------
// Moments

/// log E[e^{λL}] of the Laplace mechanism's privacy loss:
/// log[(λ+1)/(2λ+1)·e^{λε} + λ/(2λ+1)·e^{−ε(λ+1)}], in log-sum-exp form.
pub fn laplace_moment(lambda: f64, eps: f64) -> f64 {
    let denom = 2.0 * lambda + 1.0;
    let a = ((lambda + 1.0) / denom).ln() + lambda * eps;
    if lambda == 0.0 {
        return a;
    }
    let b = (lambda / denom).ln() - eps * (lambda + 1.0);
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// log E[e^{λL}] of the Gaussian mechanism: (λ²+λ)Δ²/(2σ²).
pub fn gaussian_moment(lambda: f64, sensitivity: f64, sigma: f64) -> f64 {
    (lambda * lambda + lambda) * sensitivity * sensitivity / (2.0 * sigma * sigma)
}

/// Upper bound on α(λ) for λ = 1..=λ_max.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCurve {
    values: Vec<f64>,
}

impl MomentCurve {
    pub fn from_charges(charges: &[Charge], lambda_max: u32) -> Self {
        let values = (1..=lambda_max)
            .map(|l| {
                charges
                    .iter()
                    .map(|c| c.count as f64 * c.release.moment(l as f64))
                    .sum()
            })
            .collect();
        Self { values }
    }

    pub fn from_fn(lambda_max: u32, f: impl Fn(u32) -> f64) -> Self {
        Self {
            values: (1..=lambda_max).map(f).collect(),
        }
    }

    pub fn lambda_max(&self) -> u32 {
        self.values.len() as u32
    }

    pub fn at(&self, lambda: u32) -> f64 {
        self.values[lambda as usize - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Pointwise sum (moments compose additively).
    pub fn add(&self, other: &MomentCurve) -> MomentCurve {
        MomentCurve {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> MomentCurve {
        MomentCurve {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Summed moment curve of a plan calibrated at `eps_i`.
pub fn ma_total_moment(plan: &CompositionPlan, eps_i: f64) -> MomentCurve {
    MomentCurve::from_charges(&plan.charges(eps_i), plan.lambda_max)
}

/// Smallest ε with min_λ exp(α(λ) − λε) ≤ δ over integer λ in range,
/// i.e. min_λ (α(λ) + ln(1/δ)) / λ.
pub fn ma_tail_epsilon(curve: &MomentCurve, delta: f64) -> Result<f64> {
    check_range("delta", delta, delta > 0.0 && delta < 1.0, "0 < delta < 1")?;
    let log_inv = -delta.ln();
    let best = curve
        .values
        .iter()
        .enumerate()
        .map(|(i, a)| (a + log_inv) / (i + 1) as f64)
        .fold(f64::INFINITY, f64::min);
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Unattainable(
            "no moment order gives a finite bound".into(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Composition

/// Sum of ε and of δ over the releases.
pub fn linear_compose(plan: &CompositionPlan, eps_i: f64) -> PrivacyBudget {
    compose_linear(&plan.charges(eps_i))
}

/// Advanced composition with slack δ′:
/// ε = Σ ε_j(e^{ε_j} − 1) + sqrt(2 ln(1/δ′) Σ ε_j²), δ = δ′ + Σ δ_j.
/// For m identical releases this is mε_i(e^{ε_i}−1) + sqrt(2m ln(1/δ′))ε_i.
pub fn advanced_compose(plan: &CompositionPlan, eps_i: f64, slack: f64) -> PrivacyBudget {
    compose_advanced(&plan.charges(eps_i), slack)
}

/// Total ρ: ε²/2 per Laplace release, Δ²/(2σ²) per Gaussian release.
pub fn zcdp_rho(plan: &CompositionPlan, eps_i: f64) -> f64 {
    charges_rho(&plan.charges(eps_i))
}

/// ρ-zCDP implies (ρ + 2 sqrt(ρ ln(1/δ)), δ)-DP.
pub fn zcdp_to_dp(rho: f64, delta: f64) -> f64 {
    rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt()
}

fn compose_linear(charges: &[Charge]) -> PrivacyBudget {
    PrivacyBudget {
        epsilon: charges
            .iter()
            .map(|c| c.count as f64 * c.release.epsilon())
            .sum(),
        delta: sum_delta(charges),
    }
}

fn compose_advanced(charges: &[Charge], slack: f64) -> PrivacyBudget {
    if count_of(charges) == 0.0 {
        return PrivacyBudget {
            epsilon: 0.0,
            delta: 0.0,
        };
    }
    let (mut lin, mut sq) = (0.0, 0.0);
    for c in charges {
        let e = c.release.epsilon();
        lin += c.count as f64 * e * e.exp_m1();
        sq += c.count as f64 * e * e;
    }
    PrivacyBudget {
        epsilon: lin + (2.0 * (1.0 / slack).ln() * sq).sqrt(),
        delta: slack + sum_delta(charges),
    }
}

fn charges_rho(charges: &[Charge]) -> f64 {
    charges
        .iter()
        .map(|c| c.count as f64 * c.release.rho())
        .sum()
}

/// δ left for the slack / tail term once the Gaussian δ_i are paid.
fn residual_delta(charges: &[Charge], total_delta: f64) -> Result<f64> {
    let left = total_delta - sum_delta(charges);
    if left > 0.0 {
        Ok(left)
    } else {
        Err(Error::Unattainable(format!(
            "Gaussian releases alone spend δ = {:e} ≥ total δ = {total_delta:e}",
            sum_delta(charges)
        )))
    }
}

/// Total (ε, δ) of a list of charges under `method`, targeting total
/// failure probability `total_delta`.
///
/// * Linear: the plain sums.
/// * Advanced: δ′ = `slack`, or `total_delta − Σδ_j` when `None`.
/// * zCDP: ε = ρ + 2 sqrt(ρ ln(1/δ)) at δ = `total_delta`. The zCDP
///   bounds for both mechanisms are exact, so δ_j does not enter.
/// * MA: the tail bound is evaluated at δ_tail = `total_delta − Σδ_j`, so
///   the Gaussian δ_j are paid additively outside the moment bound.
pub fn compose_charges(
    charges: &[Charge],
    method: Method,
    total_delta: f64,
    slack: Option<f64>,
    lambda_max: u32,
) -> Result<PrivacyBudget> {
    match method {
        Method::Linear => Ok(compose_linear(charges)),
        Method::Advanced => {
            let s = match slack {
                Some(s) => {
                    check_range("advanced_slack", s, s > 0.0 && s < 1.0, "0 < slack < 1")?;
                    s
                }
                None => residual_delta(charges, total_delta)?,
            };
            Ok(compose_advanced(charges, s))
        }
        Method::Zcdp => {
            check_range(
                "delta",
                total_delta,
                total_delta > 0.0 && total_delta < 1.0,
                "0 < delta < 1",
            )?;
            Ok(PrivacyBudget {
                epsilon: zcdp_to_dp(charges_rho(charges), total_delta),
                delta: total_delta,
            })
        }
        Method::Ma => {
            let tail = residual_delta(charges, total_delta)?;
            let curve = MomentCurve::from_charges(charges, lambda_max);
            Ok(PrivacyBudget {
                epsilon: ma_tail_epsilon(&curve, tail)?,
                delta: tail + sum_delta(charges),
            })
        }
    }
}

/// Total spend of a plan calibrated at `eps_i`.
pub fn plan_spend(plan: &CompositionPlan, eps_i: f64, total_delta: f64) -> Result<PrivacyBudget> {
    compose_charges(
        &plan.charges(eps_i),
        plan.method,
        total_delta,
        plan.advanced_slack,
        plan.lambda_max,
    )
}

/// Recomposes a trace under `method` and checks it against `total`.
pub fn audit_trace(
    trace: &AccountingTrace,
    method: Method,
    total: &PrivacyBudget,
    lambda_max: u32,
) -> Result<PrivacyBudget> {
    let spend = compose_charges(&trace_charges(trace), method, total.delta, None, lambda_max)?;
    if spend.within(total, 1e-9) {
        Ok(spend)
    } else {
        Err(Error::Unattainable(format!(
            "trace spends (ε = {}, δ = {:e}) over budget (ε = {}, δ = {:e})",
            spend.epsilon, spend.delta, total.epsilon, total.delta
        )))
    }
}

// ---------------------------------------------------------------------------
// Calibration

/// Per-mechanism budget chosen for a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub eps_i: f64,
    pub delta_i: f64,
    /// σ/Δ of every Gaussian release (0 when there are none).
    pub sigma_per_sensitivity: f64,
    /// Total spend at `eps_i`, always within the requested budget.
    pub spend: PrivacyBudget,
}

fn feasible(plan: &CompositionPlan, eps_i: f64, total: &PrivacyBudget) -> bool {
    const REL: f64 = 1e-12;
    matches!(plan_spend(plan, eps_i, total.delta),
        Ok(s) if s.epsilon <= total.epsilon * (1.0 + REL) && s.delta <= total.delta * (1.0 + REL))
}

fn upper_bracket(plan: &CompositionPlan, total: &PrivacyBudget) -> f64 {
    if plan.gaussian > 0 {
        EPS_I_MAX
    } else {
        // a single Laplace release already costs ε_i under every method
        total.epsilon.max(EPS_I_MIN)
    }
}

/// Largest ε_i in the search bracket whose recomposed spend fits `total`.
///
/// Linear composition is inverted in closed form; the other methods use
/// bisection over [1e-8, 1 − 1e-8] (the Gaussian mechanism needs ε_i < 1),
/// stopping at relative width 1e-12 and returning the feasible end.
pub fn calibrate(plan: &CompositionPlan, total: &PrivacyBudget) -> Result<Calibration> {
    PrivacyBudget::new(total.epsilon, total.delta)?;
    if plan.gaussian > 0 {
        check_range(
            "delta_i",
            plan.delta_i,
            plan.delta_i > 0.0 && plan.delta_i < 1.0,
            "0 < delta_i < 1",
        )?;
    }
    let m = plan.total_mechanisms();
    if m == 0 {
        return Err(Error::InvalidParams("plan makes no releases".into()));
    }
    let hi0 = upper_bracket(plan, total);
    let eps_i = if plan.method == Method::Linear {
        let e = (total.epsilon / m as f64).min(hi0);
        if !feasible(plan, e, total) {
            return Err(unattainable(plan, total));
        }
        e
    } else {
        let (mut lo, mut hi) = (EPS_I_MIN, hi0);
        if !feasible(plan, lo, total) {
            return Err(unattainable(plan, total));
        }
        if feasible(plan, hi, total) {
            hi
        } else {
            while hi - lo > BISECT_REL_TOL * hi {
                let mid = 0.5 * (lo + hi);
                if feasible(plan, mid, total) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        }
    };
    let spend = plan_spend(plan, eps_i, total.delta)?;
    Ok(Calibration {
        eps_i,
        delta_i: plan.delta_i,
        sigma_per_sensitivity: if plan.gaussian > 0 {
            1.0 / gaussian_ratio(eps_i, plan.delta_i)
        } else {
            0.0
        },
        spend,
    })
}

fn unattainable(plan: &CompositionPlan, total: &PrivacyBudget) -> Error {
    Error::Unattainable(format!(
        "{} composition of {} releases cannot fit (ε = {}, δ = {:e}) even at ε_i = {EPS_I_MIN:e}",
        plan.method,
        plan.total_mechanisms(),
        total.epsilon,
        total.delta
    ))
}

/// [`calibrate`] with the method forced to MA.
pub fn ma_calibrate(plan: &CompositionPlan, total: &PrivacyBudget) -> Result<f64> {
    calibrate(&plan.with_method(Method::Ma), total).map(|c| c.eps_i)
}

/// [`calibrate`] with the method forced to zCDP.
pub fn zcdp_calibrate(plan: &CompositionPlan, total: &PrivacyBudget) -> Result<f64> {
    calibrate(&plan.with_method(Method::Zcdp), total).map(|c| c.eps_i)
}
