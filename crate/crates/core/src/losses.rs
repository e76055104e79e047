//! Photometric, smoothness and pose losses, and the two stage objectives.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Grid, TensorError};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_LAMBDA_SSIM: f64 = 0.85;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no valid pixels under the mask")]
    EmptyValidRegion,
    #[error("map of shape {0:?} is too small (need H >= 2 and W >= 2)")]
    Degenerate(Vec<usize>),
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f32),
    #[error("term {name} is not finite ({value})")]
    NonFiniteTerm { name: &'static str, value: f64 },
    #[error("weight {name} must be finite and >= 0, got {value}")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error("lambda_ssim must lie in [0, 1], got {0}")]
    InvalidLambda(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for SynWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
}

impl Default for RealWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.01,
            alpha3: 1.0,
            alpha4: 1.0,
        }
    }
}

/// Stage weights; the two stages keep separate alpha namespaces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub syn: SynWeights,
    pub real: RealWeights,
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            syn: SynWeights::default(),
            real: RealWeights::default(),
            lambda_ssim: DEFAULT_LAMBDA_SSIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: String,
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

fn assemble(stage: &str, terms: &[(&'static str, f64, &'static str, f64)]) -> Result<LossReport, LossError> {
    let mut total = 0.0f64;
    let mut out = Vec::with_capacity(terms.len());
    for &(name, value, weight_name, weight) in terms {
        if !value.is_finite() {
            return Err(LossError::NonFiniteTerm { name, value });
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(LossError::InvalidWeight {
                name: weight_name,
                value: weight,
            });
        }
        total += weight * value;
        out.push(LossTerm {
            name: name.to_string(),
            value,
            weight,
        });
    }
    Ok(LossReport {
        stage: stage.to_string(),
        terms: out,
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynTerms {
    pub depth: f64,
    pub cost_volume: f64,
    pub pose: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealTerms {
    pub consistent_depth: f64,
    pub distribution: f64,
    pub cost_volume: f64,
    pub pose: f64,
}

/// Synthetic-stage objective `a1 L_d + a2 L_cv + a3 L_T`.
pub fn assemble_syn(terms: &SynTerms, weights: &SynWeights) -> Result<LossReport, LossError> {
    assemble(
        "syn",
        &[
            ("depth", terms.depth, "alpha1", weights.alpha1),
            ("cost_volume", terms.cost_volume, "alpha2", weights.alpha2),
            ("pose", terms.pose, "alpha3", weights.alpha3),
        ],
    )
}

/// Real-stage objective `a1 L_cd + a2 L_dis + a3 L_cv + a4 L_T`.
pub fn assemble_real(terms: &RealTerms, weights: &RealWeights) -> Result<LossReport, LossError> {
    assemble(
        "real",
        &[
            ("consistent_depth", terms.consistent_depth, "alpha1", weights.alpha1),
            ("distribution", terms.distribution, "alpha2", weights.alpha2),
            ("cost_volume", terms.cost_volume, "alpha3", weights.alpha3),
            ("pose", terms.pose, "alpha4", weights.alpha4),
        ],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PoseNorm {
    #[default]
    L2,
    SquaredL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseLoss {
    pub rotation: f64,
    pub translation: f64,
    pub total: f64,
}

pub fn loss_pose(theta_a: [f64; 3], trans_a: [f64; 3], theta_b: [f64; 3], trans_b: [f64; 3], norm: PoseNorm) -> PoseLoss {
    let dist = |a: [f64; 3], b: [f64; 3]| {
        let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        match norm {
            PoseNorm::L2 => sq.sqrt(),
            PoseNorm::SquaredL2 => sq,
        }
    };
    let rotation = dist(theta_a, theta_b);
    let translation = dist(trans_a, trans_b);
    PoseLoss {
        rotation,
        translation,
        total: rotation + translation,
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Per-pixel `(1 - SSIM) / 2` over a 3×3 window with reflection padding, clamped to [0, 1].
pub fn ssim_dissimilarity(x: &[f32], y: &[f32], height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let rr = reflect(r as isize + dr, height);
                    let cc = reflect(c as isize + dc, width);
                    let a = f64::from(x[rr * width + cc]);
                    let b = f64::from(y[rr * width + cc]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / 9.0, sy / 9.0);
            let vx = sxx / 9.0 - mx * mx;
            let vy = syy / 9.0 - my * my;
            let cov = sxy / 9.0 - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            out.push(((1.0 - num / den) / 2.0).clamp(0.0, 1.0));
        }
    }
    out
}

/// Masked mix of SSIM dissimilarity and absolute difference, averaged over
/// channels and then over pixels where `mask > 0.5`.
pub fn loss_photometric(target: &Grid, warped: &Grid, mask: &Grid, lambda_ssim: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&lambda_ssim) {
        return Err(LossError::InvalidLambda(lambda_ssim));
    }
    target.ensure_same_shape(warped)?;
    let (channels, height, width) = target.as_chw()?;
    if mask.shape() != [height, width] {
        return Err(TensorError::ShapeMismatch(mask.shape().to_vec(), vec![height, width]).into());
    }
    let plane = height * width;
    let mut per_pixel = vec![0.0f64; plane];
    for c in 0..channels {
        let x = &target.data()[c * plane..(c + 1) * plane];
        let y = &warped.data()[c * plane..(c + 1) * plane];
        let dssim = ssim_dissimilarity(x, y, height, width);
        for i in 0..plane {
            let l1 = (f64::from(x[i]) - f64::from(y[i])).abs();
            per_pixel[i] += lambda_ssim * dssim[i] + (1.0 - lambda_ssim) * l1;
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, &m) in mask.data().iter().enumerate() {
        if m > 0.5 {
            sum += per_pixel[i] / channels as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(LossError::EmptyValidRegion);
    }
    Ok(sum / count as f64)
}

/// Edge-aware first-order smoothness of mean-normalized disparity.
pub fn loss_smooth(depth: &Grid, image: &Grid) -> Result<f64, LossError> {
    let (h, w) = depth.dims2()?;
    if h < 2 || w < 2 {
        return Err(LossError::Degenerate(depth.shape().to_vec()));
    }
    let (channels, ih, iw) = image.as_chw()?;
    if (ih, iw) != (h, w) {
        return Err(TensorError::ShapeMismatch(image.shape().to_vec(), depth.shape().to_vec()).into());
    }
    if let Some(&bad) = depth.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(LossError::NonPositiveDepth(bad));
    }
    let disp: Vec<f64> = depth.data().iter().map(|&d| 1.0 / f64::from(d)).collect();
    let mean = disp.iter().sum::<f64>() / disp.len() as f64;
    let norm: Vec<f64> = disp.iter().map(|d| d / mean).collect();
    let img = |c: usize, y: usize, x: usize| f64::from(image.data()[(c * h + y) * w + x]);
    let image_grad = |y0: usize, x0: usize, y1: usize, x1: usize| {
        (0..channels).map(|c| (img(c, y0, x0) - img(c, y1, x1)).abs()).sum::<f64>() / channels as f64
    };

    let mut gx = 0.0f64;
    for y in 0..h {
        for x in 0..w - 1 {
            let d = (norm[y * w + x] - norm[y * w + x + 1]).abs();
            gx += d * (-image_grad(y, x, y, x + 1)).exp();
        }
    }
    let mut gy = 0.0f64;
    for y in 0..h - 1 {
        for x in 0..w {
            let d = (norm[y * w + x] - norm[(y + 1) * w + x]).abs();
            gy += d * (-image_grad(y, x, y + 1, x)).exp();
        }
    }
    Ok(gx / (h * (w - 1)) as f64 + gy / ((h - 1) * w) as f64)
}
