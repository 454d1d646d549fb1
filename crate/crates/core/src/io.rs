//! CSV ingestion and export, synthetic mixtures, cross-validation splits
//! and result persistence.
//!
//! Results are written as line-delimited JSON (one [`ExperimentResult`]
//! per line) plus a flat CSV summary with one row per (method, ε) and one
//! row per non-private baseline:
//!
//! | column    | meaning                                             |
//! |-----------|-----------------------------------------------------|
//! | model     | `mog`, `fa` or `kmeans`                             |
//! | method    | composition method or k-means variant, `nonprivate` |
//! | scenario  | `llg` / `ggg` for mixtures, empty otherwise         |
//! | epsilon   | total ε (empty for the baseline)                    |
//! | delta     | total δ (empty for the baseline)                    |
//! | metric    | `test_loglik` or `nicv`                             |
//! | count     | number of cells summarized                          |
//! | median    | median metric                                       |
//! | q1, q3    | first and third quartile (linear interpolation)     |
//! | iqr       | q3 − q1                                             |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, BoundedDataset, RowMatrix};
use crate::error::{Error, Result};
use crate::mog::MoGParams;

/// Reads a rectangular numeric CSV. With `has_header` the first line is
/// skipped. Errors name the 1-based line of the offending record.
pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<RowMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut cols: Option<usize> = None;
    let mut rows = 0;
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if idx == 0 && has_header {
            continue;
        }
        let line = rec.position().map(|p| p.line()).unwrap_or(idx as u64 + 1);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::RaggedRow {
                    line,
                    expected: c,
                    found: rec.len(),
                })
            }
            _ => {}
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::NonNumeric {
                line,
                column: j + 1,
                value: field.to_string(),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    RowMatrix::new(rows, cols.unwrap_or(0), data)
}

pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<RowMatrix> {
    read_csv(BufReader::new(File::open(path)?), has_header)
}

/// Writes rows with shortest round-trip formatting, so [`load_csv`]
/// recovers every finite value exactly.
pub fn write_csv<W: Write>(writer: W, m: &RowMatrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for row in m.iter_rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, m: &RowMatrix) -> Result<()> {
    write_csv(BufWriter::new(File::create(path)?), m)
}

/// A planted mixture sample.
#[derive(Debug, Clone)]
pub struct SynthData {
    /// Unscaled draws.
    pub raw: RowMatrix,
    /// `raw` scaled into the unit ball.
    pub data: BoundedDataset,
    pub labels: Vec<usize>,
    /// Generating parameters expressed in the scaled coordinates.
    pub truth: MoGParams,
}

/// Planted means before scaling: k points evenly spaced on a circle in the
/// first two coordinates with neighboring means `separation` apart (on a
/// line when d = 1).
pub fn planted_means(d: usize, k: usize, separation: f64) -> Vec<DVector<f64>> {
    (0..k)
        .map(|j| {
            let mut m = DVector::zeros(d);
            if k == 1 {
                return m;
            }
            if d == 1 || k == 2 {
                m[0] = separation * (j as f64 - (k as f64 - 1.0) / 2.0);
            } else {
                let r = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
                let a = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                m[0] = r * a.cos();
                m[1] = r * a.sin();
            }
            m
        })
        .collect()
}

/// Draws n points from an equal-weight mixture of identity-covariance
/// Gaussians at [`planted_means`], then scales into the unit ball.
pub fn synth_mog(n: usize, d: usize, k: usize, separation: f64, seed: u64) -> Result<SynthData> {
    if k == 0 || d == 0 {
        return Err(Error::InvalidParams("k and d must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { n, needed: k });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let means = planted_means(d, k, separation);
    let mut labels = Vec::with_capacity(n);
    let mut buf = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z = rng.random_range(0..k);
        labels.push(z);
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            buf.push(means[z][j] + e);
        }
    }
    let raw = RowMatrix::new(n, d, buf)?;
    let data = preprocess(&raw)?;
    let s = data.scale();
    let truth = MoGParams::new(
        vec![1.0 / k as f64; k],
        means.iter().map(|m| m / s).collect(),
        vec![DMatrix::identity(d, d) / (s * s); k],
    )?;
    Ok(SynthData {
        raw,
        data,
        labels,
        truth,
    })
}

/// One train/test pair of row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles 0..n and cuts it into `folds` contiguous test blocks whose
/// sizes differ by at most one; each train set is the complement.
pub fn cv_split(n: usize, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::OutOfRange {
            name: "folds",
            value: folds as f64,
            expected: ">= 2",
        });
    }
    if n < folds {
        return Err(Error::TooFewPoints { n, needed: folds });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        let mut test = idx[start..start + len].to_vec();
        let mut train: Vec<usize> = idx[..start].iter().chain(&idx[start + len..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        out.push(Fold { train, test });
        start += len;
    }
    Ok(out)
}

/// Counts by kind in a run's accounting trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mechanisms: usize,
    pub laplace: usize,
    pub gaussian: usize,
    pub analyze_gauss: usize,
    pub floored: usize,
    pub warnings: usize,
}

/// One (method, ε, fold, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model: String,
    pub method: String,
    pub scenario: Option<String>,
    pub estimator: Option<String>,
    pub epsilon: f64,
    pub delta: f64,
    pub delta_i: f64,
    pub fold: usize,
    pub seed: usize,
    pub metric_name: String,
    pub metric: f64,
    pub eps_i: f64,
    pub trace: TraceSummary,
    /// Spend recomputed from the trace with the cell's composition method.
    pub audit_epsilon: f64,
    pub audit_delta: f64,
    pub wall_ms: f64,
}

/// Non-private reference for one (fold, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub model: String,
    pub fold: usize,
    pub seed: usize,
    pub metric_name: String,
    pub metric: f64,
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: Read, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// One row of the plot-ready summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub method: String,
    pub scenario: Option<String>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub metric: String,
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

fn summarize_values(values: &[f64]) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (quantile(&v, 0.5), quantile(&v, 0.25), quantile(&v, 0.75))
}

/// Groups results by (method, scenario, ε) in order of first appearance
/// and appends one row per baseline model.
pub fn summarize(results: &[ExperimentResult], baseline: &[BaselineResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, Option<String>, f64)> = Vec::new();
    for r in results {
        let key = (r.method.clone(), r.scenario.clone(), r.epsilon);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut rows = Vec::with_capacity(keys.len() + 1);
    for (method, scenario, eps) in keys {
        let cell: Vec<&ExperimentResult> = results
            .iter()
            .filter(|r| r.method == method && r.scenario == scenario && r.epsilon == eps)
            .collect();
        let values: Vec<f64> = cell.iter().map(|r| r.metric).collect();
        let (med, q1, q3) = summarize_values(&values);
        rows.push(SummaryRow {
            model: cell[0].model.clone(),
            method,
            scenario,
            epsilon: Some(eps),
            delta: Some(cell[0].delta),
            metric: cell[0].metric_name.clone(),
            count: values.len(),
            median: med,
            q1,
            q3,
            iqr: q3 - q1,
        });
    }
    let mut models: Vec<&str> = Vec::new();
    for b in baseline {
        if !models.contains(&b.model.as_str()) {
            models.push(&b.model);
        }
    }
    for m in models {
        let cell: Vec<&BaselineResult> = baseline.iter().filter(|b| b.model == m).collect();
        let values: Vec<f64> = cell.iter().map(|b| b.metric).collect();
        let (med, q1, q3) = summarize_values(&values);
        rows.push(SummaryRow {
            model: m.to_string(),
            method: "nonprivate".into(),
            scenario: None,
            epsilon: None,
            delta: None,
            metric: cell[0].metric_name.clone(),
            count: values.len(),
            median: med,
            q1,
            q3,
            iqr: q3 - q1,
        });
    }
    rows
}

pub fn write_summary_csv<W: Write>(writer: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
