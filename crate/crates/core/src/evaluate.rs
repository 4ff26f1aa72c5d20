//! Metrics, two-member ensemble averaging, leaderboard tables and the
//! prediction-density export.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::Target;
use crate::textfmt::{format_f64, format_pct};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("metric over zero rows")]
    Empty,
    #[error("row {index}: id `{left}` does not match `{right}`")]
    RowIdMismatch {
        index: usize,
        left: String,
        right: String,
    },
    #[error("report `{label}` lacks target `{target}`")]
    MissingTarget { label: String, target: Target },
    #[error("no reports to tabulate")]
    NoReports,
}

fn check_lengths(y_true: &[f64], y_pred: &[f64]) -> Result<(), EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Mean absolute percentage error in percent, with a denominator floor of 1
/// so zero counts stay finite.
pub fn mape(y_true: &[f64], y_pred: &[f64]) -> Result<f64, EvalError> {
    check_lengths(y_true, y_pred)?;
    let sum: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(&y, &p)| (y - p).abs() / y.abs().max(1.0))
        .sum();
    Ok(100.0 * sum / y_true.len() as f64)
}

pub fn mse(y_true: &[f64], y_pred: &[f64]) -> Result<f64, EvalError> {
    check_lengths(y_true, y_pred)?;
    let sum: f64 = y_true.iter().zip(y_pred).map(|(&y, &p)| (y - p) * (y - p)).sum();
    Ok(sum / y_true.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    /// Percent.
    pub mape: f64,
    /// Raw scale.
    pub mse: f64,
    pub n_rows: usize,
}

impl TargetMetrics {
    pub fn compute(y_true: &[f64], y_pred: &[f64]) -> Result<TargetMetrics, EvalError> {
        Ok(TargetMetrics {
            mape: mape(y_true, y_pred)?,
            mse: mse(y_true, y_pred)?,
            n_rows: y_true.len(),
        })
    }
}

/// Per-target metrics for one model, computed on raw counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub targets: BTreeMap<Target, TargetMetrics>,
}

impl MetricReport {
    pub fn new(label: impl Into<String>) -> Self {
        MetricReport {
            label: label.into(),
            targets: BTreeMap::new(),
        }
    }

    pub fn with_mapes(label: impl Into<String>, mapes: [f64; 4]) -> Self {
        let mut r = MetricReport::new(label);
        for (t, m) in Target::ALL.into_iter().zip(mapes) {
            r.targets.insert(
                t,
                TargetMetrics {
                    mape: m,
                    mse: f64::NAN,
                    n_rows: 0,
                },
            );
        }
        r
    }

    pub fn n_rows(&self) -> usize {
        self.targets.values().map(|m| m.n_rows).max().unwrap_or(0)
    }
}

/// Predictions for one target keyed by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub row_ids: Vec<String>,
    pub values: Vec<f64>,
}

/// Where the two members are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AverageSpace {
    /// Arithmetic mean of raw counts.
    #[default]
    Raw,
    /// Mean of `log1p` values, mapped back with `expm1`.
    Log,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    pub row_ids: Vec<String>,
    pub averaged: Vec<f64>,
    pub members: [Vec<f64>; 2],
}

pub fn average_ensemble(a: &Predictions, b: &Predictions) -> Result<EnsembleOutput, EvalError> {
    average_ensemble_in(a, b, AverageSpace::Raw)
}

pub fn average_ensemble_in(
    a: &Predictions,
    b: &Predictions,
    space: AverageSpace,
) -> Result<EnsembleOutput, EvalError> {
    if a.row_ids.len() != b.row_ids.len() || a.values.len() != b.values.len() {
        return Err(EvalError::LengthMismatch(a.values.len(), b.values.len()));
    }
    if let Some(index) = a.row_ids.iter().zip(&b.row_ids).position(|(x, y)| x != y) {
        return Err(EvalError::RowIdMismatch {
            index,
            left: a.row_ids[index].clone(),
            right: b.row_ids[index].clone(),
        });
    }
    let averaged = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| match space {
            AverageSpace::Raw => 0.5 * (x + y),
            AverageSpace::Log => (0.5 * (x.max(0.0).ln_1p() + y.max(0.0).ln_1p())).exp_m1(),
        })
        .collect();
    Ok(EnsembleOutput {
        row_ids: a.row_ids.clone(),
        averaged,
        members: [a.values.clone(), b.values.clone()],
    })
}

// ---------------------------------------------------------------------------
// Leaderboard
// ---------------------------------------------------------------------------

/// MAPE table with one row per model and columns Comment, Heart, Play, Share.
#[derive(Clone, Debug, PartialEq)]
pub struct Leaderboard {
    pub rows: Vec<(String, [f64; 4])>,
}

pub fn leaderboard_report(reports: &[MetricReport]) -> Result<Leaderboard, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let rows = reports
        .iter()
        .map(|r| {
            let mut cells = [0.0; 4];
            for t in Target::ALL {
                cells[t.index()] = r
                    .targets
                    .get(&t)
                    .ok_or_else(|| EvalError::MissingTarget {
                        label: r.label.clone(),
                        target: t,
                    })?
                    .mape;
            }
            Ok((r.label.clone(), cells))
        })
        .collect::<Result<_, _>>()?;
    Ok(Leaderboard { rows })
}

impl Leaderboard {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,comment,heart,play,share\n");
        for (label, cells) in &self.rows {
            let cells: Vec<String> = cells.iter().map(|&c| format_pct(c)).collect();
            let _ = writeln!(out, "{label},{}", cells.join(","));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|(l, _)| l.len() + 1).max().unwrap_or(0).max(6);
        let mut out = format!("{:<width$}", "");
        for t in Target::ALL {
            let _ = write!(out, " {:>8}", t.title());
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            let _ = write!(out, "{:<width$}", format!("{label}:"));
            for c in cells {
                let _ = write!(out, " {:>8}", format_pct(*c));
            }
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Density export
// ---------------------------------------------------------------------------

pub const DENSITY_BINS: usize = 64;

/// One prediction distribution to histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySeries {
    pub model: String,
    pub split: String,
    pub target: Target,
    pub values: Vec<f64>,
}

/// Histograms on a shared log axis: 64 equal-width bins in `log1p` space
/// spanning `[0, max]` across all series of the same target.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityTable {
    /// Raw-scale bin edges per target, `DENSITY_BINS + 1` each.
    pub edges: BTreeMap<Target, Vec<f64>>,
    pub series: Vec<(String, String, Target, Vec<u64>)>,
}

/// Bin index of `v` on an axis whose top is `log1p(max) = top`.
pub fn density_bin(v: f64, top: f64) -> usize {
    if top <= 0.0 {
        return 0;
    }
    let pos = v.max(0.0).ln_1p() / top * DENSITY_BINS as f64;
    (pos.floor() as usize).min(DENSITY_BINS - 1)
}

pub fn density_export(series: &[DensitySeries]) -> Result<DensityTable, EvalError> {
    if series.is_empty() || series.iter().any(|s| s.values.is_empty()) {
        return Err(EvalError::Empty);
    }
    let mut tops: BTreeMap<Target, f64> = BTreeMap::new();
    for s in series {
        let m = s.values.iter().fold(0.0f64, |acc, &v| acc.max(v));
        let e = tops.entry(s.target).or_insert(0.0);
        *e = e.max(m.ln_1p());
    }
    let edges = tops
        .iter()
        .map(|(&t, &top)| {
            let e = (0..=DENSITY_BINS)
                .map(|i| (top * i as f64 / DENSITY_BINS as f64).exp_m1())
                .collect();
            (t, e)
        })
        .collect();
    let series = series
        .iter()
        .map(|s| {
            let top = tops[&s.target];
            let mut counts = vec![0u64; DENSITY_BINS];
            for &v in &s.values {
                counts[density_bin(v, top)] += 1;
            }
            (s.model.clone(), s.split.clone(), s.target, counts)
        })
        .collect();
    Ok(DensityTable { edges, series })
}

impl DensityTable {
    /// Long format: `target,model,split,bin,lower,upper,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target,model,split,bin,lower,upper,count\n");
        for (model, split, target, counts) in &self.series {
            let edges = &self.edges[target];
            for (i, c) in counts.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{target},{model},{split},{i},{},{},{c}",
                    format_f64(edges[i]),
                    format_f64(edges[i + 1])
                );
            }
        }
        out
    }
}

/// Seeded split of `0..n` into (fit, holdout) index lists, both ascending.
/// The holdout gets `round(n * frac)` rows.
pub fn holdout_split(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * frac).round() as usize).min(n);
    let mut holdout = perm[..k].to_vec();
    let mut fit = perm[k..].to_vec();
    holdout.sort_unstable();
    fit.sort_unstable();
    (fit, holdout)
}
