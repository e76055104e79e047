//! Plane-sweep cost volumes and the cost-volume distillation loss.
//!
//! Slice `i` of a volume scores how well the target features agree with the
//! previous-frame features warped under the fronto-parallel depth hypothesis
//! `candidates[i]`. Each pixel's channel vector is reduced to one scalar:
//!
//! * `Difference`: mean over channels of `|f_t - W(f_prev)|`, lower is better;
//! * `Dot`: cosine similarity of the two channel vectors, higher is better;
//! * `DotRaw`: plain dot product, higher is better.
//!
//! Pixels whose reprojection leaves the source image get the worst score of
//! the mode (see [`CostMode::invalid_cost`]).

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{reprojection_taps, DepthSource, GeometryError, Intrinsics, Pose};
use crate::tensor::{self, Grid, TensorError};

pub const DIFFERENCE_INVALID: f32 = 1e4;
pub const DOT_INVALID: f32 = -1.0;
pub const DOT_RAW_INVALID: f32 = -1e4;

#[derive(Debug, Error)]
pub enum CostVolumeError {
    #[error("invalid depth candidates: {0}")]
    InvalidCandidates(String),
    #[error("feature shapes differ: {0:?} vs {1:?}")]
    FeatureShape(Vec<usize>, Vec<usize>),
    #[error("cost volumes are not comparable: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sidecar {path}: {message}")]
    Sidecar { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Difference,
    Dot,
    DotRaw,
}

impl CostMode {
    pub fn invalid_cost(self) -> f32 {
        match self {
            CostMode::Difference => DIFFERENCE_INVALID,
            CostMode::Dot => DOT_INVALID,
            CostMode::DotRaw => DOT_RAW_INVALID,
        }
    }

    pub fn lower_is_better(self) -> bool {
        matches!(self, CostMode::Difference)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSpacing {
    /// Uniform in 1/depth.
    Inverse,
    /// Uniform in depth.
    Linear,
}

/// Strictly increasing positive depth hypotheses, in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DepthCandidates {
    values: Vec<f64>,
}

impl TryFrom<Vec<f64>> for DepthCandidates {
    type Error = CostVolumeError;
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<DepthCandidates> for Vec<f64> {
    fn from(c: DepthCandidates) -> Self {
        c.values
    }
}

impl DepthCandidates {
    pub fn new(values: Vec<f64>) -> Result<Self, CostVolumeError> {
        if values.is_empty() {
            return Err(CostVolumeError::InvalidCandidates("empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(CostVolumeError::InvalidCandidates(
                "values must be finite and positive".into(),
            ));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CostVolumeError::InvalidCandidates(
                "values must be strictly increasing".into(),
            ));
        }
        Ok(Self { values })
    }

    /// `count` depths from `lo` to `hi` (both included).
    pub fn spaced(lo: f64, hi: f64, count: usize, spacing: CandidateSpacing) -> Result<Self, CostVolumeError> {
        if count < 2 {
            return Err(CostVolumeError::InvalidCandidates(format!(
                "need at least 2 candidates, got {count}"
            )));
        }
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(CostVolumeError::InvalidCandidates(format!(
                "need 0 < lo < hi, got [{lo}, {hi}]"
            )));
        }
        let last = (count - 1) as f64;
        let mut values: Vec<f64> = (0..count)
            .map(|i| {
                let s = i as f64 / last;
                match spacing {
                    CandidateSpacing::Linear => lo + (hi - lo) * s,
                    CandidateSpacing::Inverse => 1.0 / (1.0 / lo + (1.0 / hi - 1.0 / lo) * s),
                }
            })
            .collect();
        values[0] = lo;
        values[count - 1] = hi;
        Self::new(values)
    }

    pub fn inverse_uniform(lo: f64, hi: f64, count: usize) -> Result<Self, CostVolumeError> {
        Self::spaced(lo, hi, count, CandidateSpacing::Inverse)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the candidate closest to `depth` in inverse depth (disparity).
    pub fn nearest_index(&self, depth: f64) -> usize {
        let target = 1.0 / depth;
        let mut best = 0;
        let mut best_gap = f64::INFINITY;
        for (i, &c) in self.values.iter().enumerate() {
            let gap = (1.0 / c - target).abs();
            if gap < best_gap {
                best = i;
                best_gap = gap;
            }
        }
        best
    }

    /// Half of the larger gap from candidate `i` to its neighbours.
    pub fn half_spacing(&self, i: usize) -> f64 {
        let v = &self.values;
        let left = if i > 0 { v[i] - v[i - 1] } else { 0.0 };
        let right = if i + 1 < v.len() { v[i + 1] - v[i] } else { 0.0 };
        0.5 * left.max(right)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub volume: Grid,
    pub candidates: DepthCandidates,
    pub mode: CostMode,
}

/// JSON sidecar stored next to the rank-3 `RDT1` volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostVolumeMeta {
    pub candidates: DepthCandidates,
    pub mode: CostMode,
}

impl CostVolume {
    pub fn new(volume: Grid, candidates: DepthCandidates, mode: CostMode) -> Result<Self, CostVolumeError> {
        let (d, _, _) = volume.dims3()?;
        if d != candidates.len() {
            return Err(CostVolumeError::Mismatch(format!(
                "volume has {d} slices but {} candidates",
                candidates.len()
            )));
        }
        Ok(Self {
            volume,
            candidates,
            mode,
        })
    }

    pub fn meta(&self) -> CostVolumeMeta {
        CostVolumeMeta {
            candidates: self.candidates.clone(),
            mode: self.mode,
        }
    }

    pub fn save(&self, tensor_path: &Path, sidecar_path: &Path) -> Result<(), CostVolumeError> {
        tensor::write_tensor(&self.volume, tensor_path)?;
        let json = serde_json::to_vec_pretty(&self.meta()).expect("sidecar serializes");
        tensor::atomic_write(sidecar_path, &json).map_err(|e| CostVolumeError::Sidecar {
            path: sidecar_path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(tensor_path: &Path, sidecar_path: &Path) -> Result<Self, CostVolumeError> {
        let volume = tensor::read_tensor(tensor_path)?;
        let sidecar_err = |message: String| CostVolumeError::Sidecar {
            path: sidecar_path.display().to_string(),
            message,
        };
        let text = std::fs::read(sidecar_path).map_err(|e| sidecar_err(e.to_string()))?;
        let meta: CostVolumeMeta = serde_json::from_slice(&text).map_err(|e| sidecar_err(e.to_string()))?;
        Self::new(volume, meta.candidates, meta.mode)
    }
}

fn pixel_cost(mode: CostMode, target: &[f64], warped: &[f64]) -> f64 {
    match mode {
        CostMode::Difference => {
            target.iter().zip(warped).map(|(a, b)| (a - b).abs()).sum::<f64>() / target.len() as f64
        }
        CostMode::DotRaw => target.iter().zip(warped).map(|(a, b)| a * b).sum(),
        CostMode::Dot => {
            let na = target.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb = warped.iter().map(|b| b * b).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return 0.0;
            }
            let dot: f64 = target.iter().zip(warped).map(|(a, b)| a * b).sum();
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    }
}

/// Plane sweep of `feat_prev` against `feat_t` over every candidate depth.
pub fn build_cost_volume(
    feat_t: &Grid,
    feat_prev: &Grid,
    pose: &Pose,
    candidates: &DepthCandidates,
    intrinsics: &Intrinsics,
    mode: CostMode,
) -> Result<CostVolume, CostVolumeError> {
    if feat_t.shape() != feat_prev.shape() {
        return Err(CostVolumeError::FeatureShape(
            feat_t.shape().to_vec(),
            feat_prev.shape().to_vec(),
        ));
    }
    if candidates.len() < 2 {
        return Err(CostVolumeError::InvalidCandidates(format!(
            "need at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    intrinsics.validate()?;
    pose.validate()?;
    let (channels, height, width) = feat_t.as_chw()?;
    let plane = height * width;
    let transform = pose.to_matrix();
    let src = feat_prev.data();
    let tgt = feat_t.data();

    let slices: Vec<Result<Vec<f32>, GeometryError>> = candidates
        .values()
        .par_iter()
        .map(|&depth| {
            let taps = reprojection_taps(height, width, &transform, DepthSource::Constant(depth), intrinsics)?;
            let mut slice = vec![mode.invalid_cost(); plane];
            let mut a = vec![0.0f64; channels];
            let mut b = vec![0.0f64; channels];
            for (i, tap) in taps.iter().enumerate() {
                let Some(tap) = tap else { continue };
                for c in 0..channels {
                    a[c] = f64::from(tgt[c * plane + i]);
                    b[c] = f64::from(tap.sample(&src[c * plane..(c + 1) * plane]) as f32);
                }
                slice[i] = pixel_cost(mode, &a, &b) as f32;
            }
            Ok(slice)
        })
        .collect();

    let mut data = Vec::with_capacity(candidates.len() * plane);
    for slice in slices {
        data.extend(slice?);
    }
    let volume = Grid::new(vec![candidates.len(), height, width], data)?;
    CostVolume::new(volume, candidates.clone(), mode)
}

/// Index of the best slice per pixel; ties go to the lowest index.
pub fn best_index(cv: &CostVolume) -> Result<Vec<usize>, CostVolumeError> {
    let (d, h, w) = cv.volume.dims3()?;
    let plane = h * w;
    let data = cv.volume.data();
    let lower = cv.mode.lower_is_better();
    Ok((0..plane)
        .map(|i| {
            let mut best = 0;
            let mut best_cost = data[i];
            for k in 1..d {
                let c = data[k * plane + i];
                let better = if lower { c < best_cost } else { c > best_cost };
                if better {
                    best = k;
                    best_cost = c;
                }
            }
            best
        })
        .collect())
}

/// Per-pixel depth of the best-scoring candidate.
pub fn best_depth(cv: &CostVolume) -> Result<Grid, CostVolumeError> {
    let (_, h, w) = cv.volume.dims3()?;
    let values = cv.candidates.values();
    let depth = best_index(cv)?.into_iter().map(|k| values[k] as f32).collect();
    Ok(Grid::new(vec![h, w], depth)?)
}

#[derive(Clone, Debug)]
pub struct CostVolumeLoss {
    pub value: f64,
    /// `dL/d cv_syn`, same shape as the volume.
    pub grad_syn: Grid,
}

/// Mean absolute difference between two comparable volumes.
pub fn loss_cv(cv_day: &CostVolume, cv_syn: &CostVolume) -> Result<CostVolumeLoss, CostVolumeError> {
    if cv_day.mode != cv_syn.mode {
        return Err(CostVolumeError::Mismatch(format!(
            "modes differ: {:?} vs {:?}",
            cv_day.mode, cv_syn.mode
        )));
    }
    if cv_day.candidates != cv_syn.candidates {
        return Err(CostVolumeError::Mismatch("candidate depths differ".into()));
    }
    cv_day.volume.ensure_same_shape(&cv_syn.volume)?;
    let n = cv_day.volume.len() as f64;
    let mut sum = 0.0f64;
    let mut grad = Vec::with_capacity(cv_day.volume.len());
    for (&a, &b) in cv_day.volume.data().iter().zip(cv_syn.volume.data()) {
        let diff = f64::from(b) - f64::from(a);
        sum += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.push((sign / n) as f32);
    }
    Ok(CostVolumeLoss {
        value: sum / n,
        grad_syn: Grid::new(cv_syn.volume.shape().to_vec(), grad)?,
    })
}
