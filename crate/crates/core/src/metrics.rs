//! Depth evaluation: AbsRel, SqRel, RMSE and δ₁ over a ground-truth range.
//!
//! Only pixels with `lo <= gt <= hi` count. Predictions are clamped into the
//! same range first. δ₁ counts pixels with `max(p/g, g/p) < 1.25` (strict).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Grid, TensorError};

pub const DELTA1_THRESHOLD: f64 = 1.25;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid evaluation range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("no ground-truth pixels inside [{0}, {1}]")]
    NoValidPixels(f64, f64),
    #[error("no prediction/ground-truth pairs")]
    EmptyStream,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRange {
    pub lo: f64,
    pub hi: f64,
}

impl EvalRange {
    /// nuScenes and DrivingStereo protocol.
    pub const DRIVING: EvalRange = EvalRange { lo: 0.1, hi: 80.0 };
    /// Robotcar protocol.
    pub const ROBOTCAR: EvalRange = EvalRange { lo: 0.1, hi: 50.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self, MetricsError> {
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(MetricsError::InvalidRange(lo, hi));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    /// Rescale predictions by median(gt)/median(pred) over valid pixels.
    pub median_scaling: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    /// Percent.
    pub delta1: f64,
    pub n_valid: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    hits: usize,
    n: usize,
}

impl Sums {
    fn add(&mut self, p: f64, g: f64) {
        let d = p - g;
        self.abs_rel += d.abs() / g;
        self.sq_rel += d * d / g;
        self.sq += d * d;
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            self.hits += 1;
        }
        self.n += 1;
    }

    fn row(&self) -> MetricRow {
        let n = self.n as f64;
        MetricRow {
            abs_rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            delta1: 100.0 * self.hits as f64 / n,
            n_valid: self.n,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn accumulate(pred: &Grid, gt: &Grid, range: &EvalRange, opts: &EvalOptions, sums: &mut Sums) -> Result<(), MetricsError> {
    pred.ensure_same_shape(gt)?;
    let valid: Vec<(f64, f64)> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (f64::from(p), f64::from(g)))
        .filter(|&(_, g)| range.contains(g))
        .collect();
    if valid.is_empty() {
        return Err(MetricsError::NoValidPixels(range.lo, range.hi));
    }
    let ratio = if opts.median_scaling {
        median(valid.iter().map(|v| v.1).collect()) / median(valid.iter().map(|v| v.0).collect())
    } else {
        1.0
    };
    for (p, g) in valid {
        let p = if opts.median_scaling { p * ratio } else { p };
        sums.add(p.clamp(range.lo, range.hi), g);
    }
    Ok(())
}

pub fn evaluate(pred: &Grid, gt: &Grid, range: &EvalRange) -> Result<MetricRow, MetricsError> {
    evaluate_with(pred, gt, range, &EvalOptions::default())
}

pub fn evaluate_with(pred: &Grid, gt: &Grid, range: &EvalRange, opts: &EvalOptions) -> Result<MetricRow, MetricsError> {
    let mut sums = Sums::default();
    accumulate(pred, gt, range, opts, &mut sums)?;
    Ok(sums.row())
}

/// Equal-weight mean of per-image rows; `n_valid` is the total.
pub fn mean_rows(rows: &[MetricRow]) -> Result<MetricRow, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyStream);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(MetricRow {
        abs_rel: mean(|r| r.abs_rel),
        sq_rel: mean(|r| r.sq_rel),
        rmse: mean(|r| r.rmse),
        delta1: mean(|r| r.delta1),
        n_valid: rows.iter().map(|r| r.n_valid).sum(),
    })
}

/// Per-image metrics averaged with equal image weight.
pub fn evaluate_batch<'a, I>(pairs: I, range: &EvalRange) -> Result<MetricRow, MetricsError>
where
    I: IntoIterator<Item = (&'a Grid, &'a Grid)>,
{
    let rows = pairs
        .into_iter()
        .map(|(p, g)| evaluate(p, g, range))
        .collect::<Result<Vec<_>, _>>()?;
    mean_rows(&rows)
}

/// All valid pixels of all images pooled into one row.
pub fn evaluate_pooled<'a, I>(pairs: I, range: &EvalRange, opts: &EvalOptions) -> Result<MetricRow, MetricsError>
where
    I: IntoIterator<Item = (&'a Grid, &'a Grid)>,
{
    let mut sums = Sums::default();
    for (p, g) in pairs {
        accumulate(p, g, range, opts, &mut sums)?;
    }
    if sums.n == 0 {
        return Err(MetricsError::EmptyStream);
    }
    Ok(sums.row())
}
