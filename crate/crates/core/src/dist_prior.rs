//! Differentiable depth histograms and the KL structure-prior loss.
//!
//! A depth map is binned softly with a sigmoid-difference kernel: for bin
//! `n` with edges `e_n = d_min + n L` and `e_{n+1}`,
//!
//! ```text
//! P(n) = 1/HW * sum_x [ sigma((D(x) - e_n) / a) - sigma((D(x) - e_{n+1}) / a) ]
//! ```
//!
//! which equals the bin-center form `b_n -+ L/2` with `b_n = d_min + L (n + 1/2)`.
//! The sum over bins telescopes to the two outer edges, so it is below one
//! and approaches one only when all depths sit well inside `[d_min, d_max]`.
//!
//! Before the KL divergence both histograms get a floor of [`KL_FLOOR`] per
//! bin and are renormalized to sum to one. Every gradient here accounts for
//! that smoothing.

use std::borrow::Borrow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Grid, TensorError};

pub const KL_FLOOR: f64 = 1e-8;
pub const DEFAULT_D_MIN: f64 = 3.5;
pub const DEFAULT_D_MAX: f64 = 80.0;
pub const DEFAULT_BINS: usize = 100;
/// Bandwidth as a fraction of the bin width.
/// Default bandwidth is the bin width divided by this.
pub const DEFAULT_BANDWIDTH_DIVISOR: f64 = 20.0;

#[derive(Debug, Error)]
pub enum HistogramError {
    #[error("invalid histogram spec: {0}")]
    InvalidSpec(String),
    #[error("histogram specs differ: {}", spec_diff(.0, .1))]
    SpecMismatch(HistogramSpec, HistogramSpec),
    #[error("histogram has {found} probabilities, spec expects {expected}")]
    Length { expected: usize, found: usize },
    #[error("non-finite depth {value} at flat index {index}")]
    NonFiniteDepth { index: usize, value: f32 },
    #[error("no depth maps to aggregate")]
    EmptyStream,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
    pub bandwidth: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self::with_default_bandwidth(DEFAULT_D_MIN, DEFAULT_D_MAX, DEFAULT_BINS)
            .expect("default spec is valid")
    }
}

impl HistogramSpec {
    pub fn new(d_min: f64, d_max: f64, bins: usize, bandwidth: f64) -> Result<Self, HistogramError> {
        let spec = Self {
            d_min,
            d_max,
            bins,
            bandwidth,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with `a = L / 20`.
    pub fn with_default_bandwidth(d_min: f64, d_max: f64, bins: usize) -> Result<Self, HistogramError> {
        Self::new(d_min, d_max, bins, (d_max - d_min) / (bins as f64 * DEFAULT_BANDWIDTH_DIVISOR))
    }

    pub fn validate(&self) -> Result<(), HistogramError> {
        let bad = |m: String| Err(HistogramError::InvalidSpec(m));
        if !(self.d_min.is_finite() && self.d_max.is_finite() && self.bandwidth.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return bad(format!("need d_max > d_min > 0, got [{}, {}]", self.d_min, self.d_max));
        }
        if self.bins < 2 {
            return bad(format!("need at least 2 bins, got {}", self.bins));
        }
        if !(self.bandwidth > 0.0) {
            return bad(format!("bandwidth must be positive, got {}", self.bandwidth));
        }
        Ok(())
    }

    /// Bin width `L`.
    pub fn bin_width(&self) -> f64 {
        (self.d_max - self.d_min) / self.bins as f64
    }

    /// Bin center `b_n`.
    pub fn center(&self, n: usize) -> f64 {
        self.d_min + self.bin_width() * (n as f64 + 0.5)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins).map(|n| self.center(n)).collect()
    }

    /// The `bins + 1` bin edges `d_min + k L`.
    pub fn edges(&self) -> Vec<f64> {
        let width = self.bin_width();
        (0..=self.bins).map(|k| self.d_min + width * k as f64).collect()
    }
}

/// Soft histogram: bin layout plus (unnormalized) probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub spec: HistogramSpec,
    pub probs: Vec<f64>,
}

impl Histogram {
    pub fn new(spec: HistogramSpec, probs: Vec<f64>) -> Result<Self, HistogramError> {
        spec.validate()?;
        if probs.len() != spec.bins {
            return Err(HistogramError::Length {
                expected: spec.bins,
                found: probs.len(),
            });
        }
        Ok(Self { spec, probs })
    }

    pub fn mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Add [`KL_FLOOR`] to every bin and renormalize to unit mass.
    pub fn smoothed(&self) -> Vec<f64> {
        smooth(&self.probs)
    }

    pub fn to_grid(&self) -> Grid {
        Grid::new(vec![self.probs.len()], self.probs.iter().map(|&p| p as f32).collect())
            .expect("bins >= 2")
    }
}

fn smooth(probs: &[f64]) -> Vec<f64> {
    let total: f64 = probs.iter().map(|p| p + KL_FLOOR).sum();
    probs.iter().map(|p| (p + KL_FLOOR) / total).collect()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sigma'(z) = sigma(z) sigma(-z)`, the histogram kernel.
#[inline]
pub fn sigmoid_kernel(z: f64) -> f64 {
    sigmoid(z) * sigmoid(-z)
}

fn checked_depths(depth: &Grid) -> Result<Vec<f64>, HistogramError> {
    depth
        .data()
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value.is_finite() {
                Ok(f64::from(value))
            } else {
                Err(HistogramError::NonFiniteDepth { index, value })
            }
        })
        .collect()
}

fn spec_diff(a: &HistogramSpec, b: &HistogramSpec) -> String {
    let mut parts = Vec::new();
    if a.d_min != b.d_min {
        parts.push(format!("d_min {} vs {}", a.d_min, b.d_min));
    }
    if a.d_max != b.d_max {
        parts.push(format!("d_max {} vs {}", a.d_max, b.d_max));
    }
    if a.bins != b.bins {
        parts.push(format!("bins {} vs {}", a.bins, b.bins));
    }
    if a.bandwidth != b.bandwidth {
        parts.push(format!("bandwidth {} vs {}", a.bandwidth, b.bandwidth));
    }
    parts.join(", ")
}

fn ensure_same_spec(a: &HistogramSpec, b: &HistogramSpec) -> Result<(), HistogramError> {
    if a != b {
        return Err(HistogramError::SpecMismatch(*a, *b));
    }
    Ok(())
}

/// Soft histogram of every pixel of `depth`.
pub fn soft_histogram(depth: &Grid, spec: &HistogramSpec) -> Result<Histogram, HistogramError> {
    spec.validate()?;
    let values = checked_depths(depth)?;
    let edges = spec.edges();
    let a = spec.bandwidth;
    let scale = 1.0 / values.len() as f64;
    let probs = (0..spec.bins)
        .into_par_iter()
        .map(|n| {
            let (lo, hi) = (edges[n], edges[n + 1]);
            let mut acc = 0.0f64;
            for &d in &values {
                acc += sigmoid((d - lo) / a) - sigmoid((d - hi) / a);
            }
            acc * scale
        })
        .collect();
    Histogram::new(*spec, probs)
}

/// Closed form of `sum_n P(n)` through the two outer edges.
pub fn telescoped_mass(depth: &Grid, spec: &HistogramSpec) -> Result<f64, HistogramError> {
    spec.validate()?;
    let values = checked_depths(depth)?;
    let a = spec.bandwidth;
    let sum: f64 = values
        .iter()
        .map(|&d| sigmoid((d - spec.d_min) / a) - sigmoid((d - spec.d_max) / a))
        .sum();
    Ok(sum / values.len() as f64)
}

/// `dP(n)/dD(x)` as an N×H×W grid (rank-1 depth gives N×len).
pub fn soft_histogram_grad(depth: &Grid, spec: &HistogramSpec) -> Result<Grid, HistogramError> {
    let grad = soft_histogram_grad_f64(depth, spec)?;
    let mut shape = vec![spec.bins];
    shape.extend_from_slice(depth.shape());
    if shape.len() > 3 {
        shape = vec![spec.bins, depth.len()];
    }
    Ok(Grid::new(shape, grad.into_iter().map(|g| g as f32).collect())?)
}

fn soft_histogram_grad_f64(depth: &Grid, spec: &HistogramSpec) -> Result<Vec<f64>, HistogramError> {
    spec.validate()?;
    let values = checked_depths(depth)?;
    let edges = spec.edges();
    let a = spec.bandwidth;
    let scale = 1.0 / (values.len() as f64 * a);
    let rows: Vec<Vec<f64>> = (0..spec.bins)
        .into_par_iter()
        .map(|n| {
            let (lo, hi) = (edges[n], edges[n + 1]);
            values
                .iter()
                .map(|&d| scale * (sigmoid_kernel((d - lo) / a) - sigmoid_kernel((d - hi) / a)))
                .collect()
        })
        .collect();
    Ok(rows.concat())
}

#[derive(Clone, Debug)]
pub struct KlLoss {
    pub value: f64,
    /// `dL/dp` for the smoothed, normalized adverse histogram: `log(p/q) + 1`.
    pub grad_normalized: Vec<f64>,
    /// `dL/dP_adv` for the raw histogram, through smoothing and renormalization.
    pub grad_raw: Vec<f64>,
}

/// `KL(adv || day)` on the smoothed histograms.
pub fn kl_loss(adv: &Histogram, day: &Histogram) -> Result<KlLoss, HistogramError> {
    ensure_same_spec(&adv.spec, &day.spec)?;
    let p = adv.smoothed();
    let q = day.smoothed();
    let logs: Vec<f64> = p.iter().zip(&q).map(|(pi, qi)| (pi / qi).ln()).collect();
    let value: f64 = p.iter().zip(&logs).map(|(pi, l)| pi * l).sum();
    let total: f64 = adv.probs.iter().map(|v| v + KL_FLOOR).sum();
    Ok(KlLoss {
        value,
        grad_normalized: logs.iter().map(|l| l + 1.0).collect(),
        grad_raw: logs.iter().map(|l| (l - value) / total).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct KlDepthGrad {
    pub value: f64,
    /// `dL/dD(x)`, same shape as the depth map.
    pub grad: Grid,
}

/// KL loss of the depth map's soft histogram against `day`, with the
/// gradient chained back to every depth pixel.
pub fn kl_loss_depth_grad(depth: &Grid, spec: &HistogramSpec, day: &Histogram) -> Result<KlDepthGrad, HistogramError> {
    let (value, grad) = kl_loss_depth_grad_f64(depth, spec, day)?;
    Ok(KlDepthGrad {
        value,
        grad: Grid::new(depth.shape().to_vec(), grad.into_iter().map(|g| g as f32).collect())?,
    })
}

/// Same as [`kl_loss_depth_grad`] with the gradient kept in `f64`.
pub fn kl_loss_depth_grad_f64(
    depth: &Grid,
    spec: &HistogramSpec,
    day: &Histogram,
) -> Result<(f64, Vec<f64>), HistogramError> {
    ensure_same_spec(spec, &day.spec)?;
    let adv = soft_histogram(depth, spec)?;
    let kl = kl_loss(&adv, day)?;
    let values = checked_depths(depth)?;
    let edges = spec.edges();
    let a = spec.bandwidth;
    let scale = 1.0 / (values.len() as f64 * a);
    let g = &kl.grad_raw;
    let grad = values
        .par_iter()
        .map(|&d| {
            // sum_n g_n [K(d - e_n) - K(d - e_{n+1})], regrouped per edge.
            let mut acc = 0.0f64;
            for (k, &e) in edges.iter().enumerate() {
                let coeff = match k {
                    0 => g[0],
                    k if k == spec.bins => -g[k - 1],
                    k => g[k] - g[k - 1],
                };
                acc += coeff * sigmoid_kernel((d - e) / a);
            }
            acc * scale
        })
        .collect();
    Ok((kl.value, grad))
}

/// Equal-weight mean of per-map soft histograms.
///
/// The per-map histograms are summed in a canonical (sorted) order so the
/// result does not depend on the order of the stream.
pub fn aggregate_reference<I>(depth_maps: I, spec: &HistogramSpec) -> Result<Histogram, HistogramError>
where
    I: IntoIterator,
    I::Item: Borrow<Grid>,
{
    let mut hists = Vec::new();
    for map in depth_maps {
        hists.push(soft_histogram(map.borrow(), spec)?.probs);
    }
    mean_histogram(hists, spec)
}

/// Equal-weight mean of histograms that already share `spec`.
pub fn aggregate_histograms(hists: &[Histogram], spec: &HistogramSpec) -> Result<Histogram, HistogramError> {
    for h in hists {
        ensure_same_spec(&h.spec, spec)?;
    }
    mean_histogram(hists.iter().map(|h| h.probs.clone()).collect(), spec)
}

fn mean_histogram(mut hists: Vec<Vec<f64>>, spec: &HistogramSpec) -> Result<Histogram, HistogramError> {
    if hists.is_empty() {
        return Err(HistogramError::EmptyStream);
    }
    hists.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let count = hists.len() as f64;
    let mut probs = vec![0.0f64; spec.bins];
    for h in &hists {
        for (acc, p) in probs.iter_mut().zip(h) {
            *acc += p;
        }
    }
    for p in &mut probs {
        *p /= count;
    }
    Histogram::new(*spec, probs)
}

/// Horizontal bar chart of a histogram, one line per bin.
pub fn ascii_plot(hist: &Histogram, width: usize) -> String {
    let peak = hist.probs.iter().cloned().fold(0.0f64, f64::max);
    let mut out = String::new();
    for (n, &p) in hist.probs.iter().enumerate() {
        let bar = if peak > 0.0 {
            ((p / peak) * width as f64).round() as usize
        } else {
            0
        };
        out.push_str(&format!("{:>8.3} | {:<width$} {:.6}\n", hist.spec.center(n), "#".repeat(bar), p));
    }
    out
}
