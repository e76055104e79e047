//! Analytically solvable plane scenes used as ground truth for the warp and
//! the plane sweep.
//!
//! The scene is a single textured plane seen from two cameras. The texture is
//! a band-limited sum of sinusoids painted on the plane, parameterized by the
//! target image coordinates, so `feat_t(u, v) = texture(u, v)` and the previous
//! frame is obtained by following each source ray to the plane and back into
//! the target image. No interpolation is involved in rendering.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, Pose};
use crate::tensor::{Grid, TensorError};

/// Textures must stay below this many cycles per pixel.
pub const MAX_FREQUENCY: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("plane is behind the {camera} camera at pixel ({y}, {x})")]
    PlaneBehindCamera { camera: &'static str, y: usize, x: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneKind {
    FrontoParallel,
    SlopedPlane,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    /// Cycles per pixel along u.
    pub fu: f64,
    /// Cycles per pixel along v.
    pub fv: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub amplitude: f64,
    /// One list of components per channel; a channel is the mean of its components.
    pub channels: Vec<Vec<Sinusoid>>,
}

impl Texture {
    pub fn eval(&self, channel: usize, u: f64, v: f64) -> f64 {
        let comps = &self.channels[channel];
        let s: f64 = comps
            .iter()
            .map(|s| (2.0 * PI * (s.fu * u + s.fv * v) + s.phase).sin())
            .sum();
        self.amplitude * s / comps.len() as f64
    }

    pub fn max_frequency(&self) -> f64 {
        self.channels
            .iter()
            .flatten()
            .map(|s| s.fu.hypot(s.fv))
            .fold(0.0, f64::max)
    }
}

impl Default for Texture {
    /// Four channels below 0.014 cycles/pixel; bilinear resampling error stays
    /// under 1e-3 of the amplitude.
    fn default() -> Self {
        let comp = |fu, fv, phase| Sinusoid { fu, fv, phase };
        Self {
            amplitude: 1.0,
            channels: vec![
                vec![comp(0.0116, 0.0016, 0.3), comp(0.0044, 0.0084, 1.9)],
                vec![comp(-0.0068, 0.0096, 2.6), comp(0.0104, -0.0036, 0.8)],
                vec![comp(0.0084, 0.0072, 4.1), comp(-0.0032, 0.0108, 5.3)],
                vec![comp(0.0124, -0.0048, 1.2), comp(0.006, 0.0024, 3.7)],
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: PlaneKind,
    /// Plane depth at the principal point, meters.
    pub depth: f64,
    /// Change of inverse depth per pixel along (u, v), for `SlopedPlane`.
    #[serde(default)]
    pub inv_depth_slope: [f64; 2],
    pub texture: Texture,
    pub motion: Pose,
    pub camera: Intrinsics,
    pub height: usize,
    pub width: usize,
}

impl Default for SceneSpec {
    /// Fronto-parallel plane halfway through [3.5, 80] m, one meter of
    /// sideways motion, four texture channels.
    fn default() -> Self {
        Self {
            kind: PlaneKind::FrontoParallel,
            depth: 41.75,
            inv_depth_slope: [0.0, 0.0],
            texture: Texture::default(),
            motion: Pose::translation([1.0, 0.0, 0.0]),
            camera: Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 47.5,
                cy: 23.5,
            },
            height: 48,
            width: 96,
        }
    }
}

impl SceneSpec {
    pub fn channels(&self) -> usize {
        self.texture.channels.len()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.camera.validate()?;
        self.motion.validate()?;
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return Err(SceneError::Invalid(format!("plane depth must be positive, got {}", self.depth)));
        }
        if self.height < 2 || self.width < 2 {
            return Err(SceneError::Invalid(format!("image too small: {}x{}", self.height, self.width)));
        }
        if self.texture.channels.is_empty() || self.texture.channels.iter().any(|c| c.is_empty()) {
            return Err(SceneError::Invalid("every channel needs at least one sinusoid".into()));
        }
        let f = self.texture.max_frequency();
        if !(f < MAX_FREQUENCY) {
            return Err(SceneError::Invalid(format!(
                "texture frequency {f} is not below {MAX_FREQUENCY} cycles/pixel"
            )));
        }
        if !self.inv_depth_slope.iter().all(|s| s.is_finite()) {
            return Err(SceneError::Invalid("non-finite slope".into()));
        }
        Ok(())
    }

    /// Plane normal `n` in the target frame with `n . X = 1` on the plane.
    pub fn plane_normal(&self) -> Vector3<f64> {
        let [su, sv] = match self.kind {
            PlaneKind::FrontoParallel => [0.0, 0.0],
            PlaneKind::SlopedPlane => self.inv_depth_slope,
        };
        let k = &self.camera;
        Vector3::new(su * k.fx, sv * k.fy, 1.0 / self.depth)
    }

    /// Analytic target-frame depth at pixel `(u, v)`, if the plane is in front.
    pub fn depth_at(&self, u: f64, v: f64) -> Option<f64> {
        let inv = self.plane_normal().dot(&self.camera.backproject(u, v));
        (inv > 0.0).then(|| 1.0 / inv)
    }
}

#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub feat_t: Grid,
    pub feat_prev: Grid,
    /// Target-frame depth.
    pub depth_gt: Grid,
    /// Source-frame depth, for warping in the reverse direction.
    pub depth_prev: Grid,
    pub pose: Pose,
}

pub fn render(spec: &SceneSpec) -> Result<RenderedScene, SceneError> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels());
    let k = &spec.camera;

    let mut depth_gt = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let z = spec
                .depth_at(x as f64, y as f64)
                .ok_or(SceneError::PlaneBehindCamera { camera: "target", y, x })?;
            depth_gt.push(z as f32);
        }
    }

    // Source ray r hits the plane at lambda * r (source frame); mapped back to
    // the target frame it is R^T (lambda r - t), so n . R^T (lambda r - t) = 1.
    let m = spec.motion.to_matrix();
    let rt = m.rotation.transpose();
    let n_src = m.rotation * spec.plane_normal();
    let offset = 1.0 + n_src.dot(&m.translation);
    let mut feat_prev = vec![0.0f32; c * h * w];
    let mut depth_prev = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let r = k.backproject(x as f64, y as f64);
            let denom = n_src.dot(&r);
            let lambda = offset / denom;
            let behind = || SceneError::PlaneBehindCamera { camera: "source", y, x };
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(behind());
            }
            let p = rt * (r * lambda - m.translation);
            if !(p.z > 0.0) {
                return Err(SceneError::PlaneBehindCamera { camera: "target", y, x });
            }
            let (u, v) = k.project(&p);
            for ch in 0..c {
                feat_prev[(ch * h + y) * w + x] = spec.texture.eval(ch, u, v) as f32;
            }
            depth_prev.push(lambda as f32);
        }
    }

    let feat_t = Grid::from_fn3(c, h, w, |ch, y, x| spec.texture.eval(ch, x as f64, y as f64) as f32)?;
    Ok(RenderedScene {
        feat_t,
        feat_prev: Grid::new(vec![c, h, w], feat_prev)?,
        depth_gt: Grid::new(vec![h, w], depth_gt)?,
        depth_prev: Grid::new(vec![h, w], depth_prev)?,
        pose: spec.motion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_motion_copies_the_texture() {
        let spec = SceneSpec {
            motion: Pose::IDENTITY,
            ..SceneSpec::default()
        };
        let s = render(&spec).unwrap();
        assert_eq!(s.feat_t, s.feat_prev);
        assert!(s.depth_gt.data().iter().all(|&d| d == 41.75));
    }

    #[test]
    fn sideways_motion_is_a_horizontal_shift() {
        let spec = SceneSpec::default();
        let s = render(&spec).unwrap();
        let shift = spec.camera.fx * spec.motion.trans[0] / spec.depth;
        for ch in 0..spec.channels() {
            for y in (0..spec.height).step_by(5) {
                for x in (0..spec.width).step_by(7) {
                    let expected = spec.texture.eval(ch, x as f64 - shift, y as f64);
                    assert!((f64::from(s.feat_prev.at3(ch, y, x)) - expected).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn warp_agrees_with_analytic_correspondence() {
        use crate::geometry::{warp, DepthSource};
        let sloped = SceneSpec {
            kind: PlaneKind::SlopedPlane,
            inv_depth_slope: [1e-4, -2e-4],
            motion: Pose::new([0.002, -0.01, 0.003], [0.8, 0.1, 0.5]).unwrap(),
            ..SceneSpec::default()
        };
        for spec in [SceneSpec::default(), sloped] {
            let s = render(&spec).unwrap();
            let w = warp(&s.feat_prev, &s.pose, DepthSource::Map(&s.depth_gt), &spec.camera).unwrap();
            let plane = spec.height * spec.width;
            let mut worst = 0.0f64;
            for i in (0..plane).filter(|&i| w.mask.data()[i] > 0.5) {
                for c in 0..spec.channels() {
                    let j = c * plane + i;
                    worst = worst.max((f64::from(w.image.data()[j]) - f64::from(s.feat_t.data()[j])).abs());
                }
            }
            assert!(worst < 1e-3 * spec.texture.amplitude, "max error {worst}");
        }
    }

    #[test]
    fn sloped_plane_depth_matches_ray_intersection() {
        let spec = SceneSpec {
            kind: PlaneKind::SlopedPlane,
            depth: 10.0,
            inv_depth_slope: [0.0005, -0.001],
            ..SceneSpec::default()
        };
        let s = render(&spec).unwrap();
        // Plane 0.05 X - 0.1 Y + 0.1 Z = 1 with fx = fy = 100, cx = 47.5, cy = 23.5.
        // Depth along the ray ((u-cx)/100, (v-cy)/100, 1) is 1 / (0.05 (u-cx)/100 - 0.1 (v-cy)/100 + 0.1).
        let hand = [
            (0usize, 0usize, 1.0 / (0.05 * -0.475 - 0.1 * -0.235 + 0.1)),
            (47, 23, 1.0 / (0.05 * -0.005 - 0.1 * -0.005 + 0.1)),
            (95, 0, 1.0 / (0.05 * 0.475 - 0.1 * -0.235 + 0.1)),
            (0, 47, 1.0 / (0.05 * -0.475 - 0.1 * 0.235 + 0.1)),
            (95, 47, 1.0 / (0.05 * 0.475 - 0.1 * 0.235 + 0.1)),
        ];
        for (x, y, z) in hand {
            assert!((f64::from(s.depth_gt.at2(y, x)) - z).abs() < 1e-5 * z, "({x},{y})");
        }
        let n = spec.plane_normal();
        assert!((n - Vector3::new(0.05, -0.1, 0.1)).norm() < 1e-15);
    }

    #[test]
    fn source_depth_is_consistent_with_motion() {
        let spec = SceneSpec {
            motion: Pose::new([0.0, 0.02, 0.0], [0.5, 0.0, 1.0]).unwrap(),
            ..SceneSpec::default()
        };
        let s = render(&spec).unwrap();
        // Every source pixel lies on the plane: map it to the target frame and check n . X = 1.
        let m = spec.motion.to_matrix();
        let n = spec.plane_normal();
        for y in (0..spec.height).step_by(6) {
            for x in (0..spec.width).step_by(9) {
                let r = spec.camera.backproject(x as f64, y as f64) * f64::from(s.depth_prev.at2(y, x));
                let p = m.rotation.transpose() * (r - m.translation);
                assert!((n.dot(&p) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_bad_scenes() {
        let behind = SceneSpec {
            motion: Pose::translation([0.0, 0.0, -50.0]),
            ..SceneSpec::default()
        };
        assert!(matches!(render(&behind), Err(SceneError::PlaneBehindCamera { .. })));
        let mut aliased = SceneSpec::default();
        aliased.texture.channels[0][0].fu = 0.3;
        assert!(matches!(render(&aliased), Err(SceneError::Invalid(_))));
        let flat = SceneSpec {
            height: 1,
            ..SceneSpec::default()
        };
        assert!(render(&flat).is_err());
    }

    #[test]
    fn render_is_deterministic() {
        let spec = SceneSpec::default();
        let a = render(&spec).unwrap();
        let b = render(&spec).unwrap();
        assert_eq!(a.feat_prev, b.feat_prev);
        assert_eq!(a.depth_gt, b.depth_gt);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = SceneSpec::default();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("fronto_parallel"));
        let back: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
