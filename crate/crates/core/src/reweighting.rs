//! Consistency confidence maps and the pseudo-label depth losses.
//!
//! Every relative error divides by a prediction clamped below at
//! [`D_CLAMP`]. Absolute values use subgradient 0 at exact ties.

use thiserror::Error;

use crate::tensor::{Grid, TensorError};

/// Denominator floor in meters (the evaluation floor).
pub const D_CLAMP: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_EPS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ReweightError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyMap {
    /// `exp(-beta * |d_syn - d_day| / d_syn)`, in (0, 1].
    pub confidence: Grid,
    /// `confidence + eps`.
    pub weights: Grid,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn clamp_depth(d: f32) -> f64 {
    f64::from(d).max(D_CLAMP)
}

/// Confidence for one pixel given its relative disagreement.
pub fn confidence(relative_error: f64, beta: f64) -> f64 {
    (-beta * relative_error).exp()
}

pub fn consistency_map(d_syn: &Grid, d_day: &Grid, beta: f64, eps: f64) -> Result<ConsistencyMap, ReweightError> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(ReweightError::InvalidParameter(format!("beta must be >= 0, got {beta}")));
    }
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(ReweightError::InvalidParameter(format!("eps must be >= 0, got {eps}")));
    }
    d_syn.ensure_same_shape(d_day)?;
    let mut conf = Vec::with_capacity(d_syn.len());
    let mut weights = Vec::with_capacity(d_syn.len());
    for (&s, &d) in d_syn.data().iter().zip(d_day.data()) {
        let s64 = clamp_depth(s);
        let c = confidence((s64 - f64::from(d)).abs() / s64, beta);
        conf.push(c as f32);
        weights.push((c + eps) as f32);
    }
    Ok(ConsistencyMap {
        confidence: Grid::new(d_syn.shape().to_vec(), conf)?,
        weights: Grid::new(d_syn.shape().to_vec(), weights)?,
    })
}

#[derive(Clone, Debug)]
pub struct DepthLoss {
    pub value: f64,
    /// Gradient with respect to the prediction in the denominator.
    pub grad: Grid,
}

/// Absolute relative distillation loss `mean |d_day - d_syn| / d_syn`,
/// differentiated with respect to `d_syn`.
pub fn loss_distill(d_day: &Grid, d_syn: &Grid) -> Result<DepthLoss, ReweightError> {
    d_day.ensure_same_shape(d_syn)?;
    let n = d_day.len() as f64;
    let mut sum = 0.0f64;
    let mut grad = Vec::with_capacity(d_day.len());
    for (&t, &s) in d_day.data().iter().zip(d_syn.data()) {
        let t = f64::from(t);
        let clamped = f64::from(s) < D_CLAMP;
        let s = clamp_depth(s);
        let diff = t - s;
        sum += diff.abs() / s;
        let g = if clamped { 0.0 } else { -sign(diff) * t / (s * s) };
        grad.push((g / n) as f32);
    }
    Ok(DepthLoss {
        value: sum / n,
        grad: Grid::new(d_syn.shape().to_vec(), grad)?,
    })
}

/// Reweighted consistent-depth loss `mean W |d_real - d_syn| / d_real`,
/// differentiated with respect to `d_real`.
pub fn loss_consistent_depth(d_real: &Grid, d_syn: &Grid, weights: &Grid) -> Result<DepthLoss, ReweightError> {
    d_real.ensure_same_shape(d_syn)?;
    d_real.ensure_same_shape(weights)?;
    let n = d_real.len() as f64;
    let mut sum = 0.0f64;
    let mut grad = Vec::with_capacity(d_real.len());
    for ((&r, &s), &w) in d_real.data().iter().zip(d_syn.data()).zip(weights.data()) {
        let clamped = f64::from(r) < D_CLAMP;
        let r = clamp_depth(r);
        let (s, w) = (f64::from(s), f64::from(w));
        let diff = r - s;
        sum += w * diff.abs() / r;
        // d/dr |1 - s/r| = sign(r - s) * s / r^2
        let g = if clamped { 0.0 } else { w * sign(diff) * s / (r * r) };
        grad.push((g / n) as f32);
    }
    Ok(DepthLoss {
        value: sum / n,
        grad: Grid::new(d_real.shape().to_vec(), grad)?,
    })
}

/// Binary 8-bit PGM of a [0, 1] map, values mapped linearly onto 0..=255.
pub fn to_pgm(map: &Grid) -> Result<Vec<u8>, TensorError> {
    let (h, w) = map.dims2()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|&v| (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}
