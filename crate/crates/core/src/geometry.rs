//! Pinhole camera, axis-angle rigid transforms and inverse warping.
//!
//! A [`Pose`] maps points expressed in the target frame (time `t`) into the
//! source frame (time `t-1`): `X_src = R * X_tgt + t`. [`warp`] uses it to pull
//! a source image into the target frame given a target-frame depth.
//!
//! Pixel centers sit on integer coordinates. A projected sample is valid iff
//! it lands in `[0, W-1] x [0, H-1]` in front of the source camera; invalid
//! samples are written as zero and flagged in the returned mask.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Grid, TensorError};

/// Projected coordinates closer than this to an integer are snapped onto it,
/// so exact reprojections (e.g. the identity pose) sample without blending.
const SNAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("non-positive depth {value} at pixel ({y}, {x})")]
    NonPositiveDepth { y: usize, x: usize, value: f64 },
    #[error("depth shape {depth:?} does not match image {height}x{width}")]
    DepthShape {
        depth: Vec<usize>,
        height: usize,
        width: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("non-finite value".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Ray through pixel `(u, v)` scaled to unit depth.
    pub fn backproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Rigid motion as an axis-angle rotation (radians) and a translation (meters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub theta: [f64; 3],
    pub trans: [f64; 3],
}

/// Rotation matrix plus translation, the matrix form of a [`Pose`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        theta: [0.0; 3],
        trans: [0.0; 3],
    };

    /// Validates finiteness and wraps the rotation angle into `[0, π]`.
    pub fn new(theta: [f64; 3], trans: [f64; 3]) -> Result<Self, GeometryError> {
        if !theta.iter().chain(&trans).all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite component".into()));
        }
        Ok(Self {
            theta: canonical_axis_angle(theta),
            trans,
        })
    }

    pub fn translation(trans: [f64; 3]) -> Self {
        Self {
            theta: [0.0; 3],
            trans,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        Self::new(self.theta, self.trans).map(|_| ())
    }

    pub fn to_matrix(&self) -> RigidTransform {
        pose_to_matrix(self)
    }

    pub fn from_matrix(m: &RigidTransform) -> Pose {
        let axis_angle = Rotation3::from_matrix_unchecked(m.rotation).scaled_axis();
        Pose {
            theta: [axis_angle.x, axis_angle.y, axis_angle.z],
            trans: [m.translation.x, m.translation.y, m.translation.z],
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::from_matrix(&self.to_matrix().compose(&other.to_matrix()))
    }

    pub fn inverse(&self) -> Pose {
        invert_pose(self)
    }
}

fn canonical_axis_angle(theta: [f64; 3]) -> [f64; 3] {
    let v = Vector3::from(theta);
    let angle = v.norm();
    if angle <= PI {
        return theta;
    }
    let axis = v / angle;
    let mut wrapped = angle.rem_euclid(2.0 * PI);
    let mut axis = axis;
    if wrapped > PI {
        wrapped = 2.0 * PI - wrapped;
        axis = -axis;
    }
    let r = axis * wrapped;
    [r.x, r.y, r.z]
}

/// Rotation via the exponential map of the axis-angle vector.
pub fn pose_to_matrix(pose: &Pose) -> RigidTransform {
    let rotation = Rotation3::from_scaled_axis(Vector3::from(pose.theta));
    RigidTransform {
        rotation: rotation.into_inner(),
        translation: Vector3::from(pose.trans),
    }
}

pub fn invert_pose(pose: &Pose) -> Pose {
    let m = pose_to_matrix(pose);
    let t = -(m.rotation.transpose() * m.translation);
    Pose {
        theta: [-pose.theta[0], -pose.theta[1], -pose.theta[2]],
        trans: [t.x, t.y, t.z],
    }
}

/// Target-frame depth used to back-project pixels.
#[derive(Clone, Copy, Debug)]
pub enum DepthSource<'a> {
    /// One depth for every pixel (a fronto-parallel plane hypothesis).
    Constant(f64),
    /// Per-pixel depth, H×W.
    Map(&'a Grid),
}

#[derive(Clone, Debug)]
pub struct Warped {
    pub image: Grid,
    /// 1 where the reprojected sample is inside the source image, else 0.
    pub mask: Grid,
}

/// Bilinear tap: four flat offsets into an H×W plane and their weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_TOLERANCE {
        r
    } else {
        v
    }
}

/// Reprojection of every target pixel into the source image.
///
/// Returns one optional bilinear tap per pixel (row-major); `None` marks an
/// invalid sample. The taps depend only on geometry, never on image values.
pub(crate) fn reprojection_taps(
    height: usize,
    width: usize,
    transform: &RigidTransform,
    depth: DepthSource<'_>,
    intrinsics: &Intrinsics,
) -> Result<Vec<Option<Tap>>, GeometryError> {
    if let DepthSource::Map(map) = depth {
        if map.shape() != [height, width] {
            return Err(GeometryError::DepthShape {
                depth: map.shape().to_vec(),
                height,
                width,
            });
        }
    }
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    let mut taps = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let z = match depth {
                DepthSource::Constant(z) => z,
                DepthSource::Map(map) => f64::from(map.at2(y, x)),
            };
            if !(z > 0.0) {
                return Err(GeometryError::NonPositiveDepth { y, x, value: z });
            }
            let p = transform.apply(&(intrinsics.backproject(x as f64, y as f64) * z));
            if !(p.z > 0.0) {
                taps.push(None);
                continue;
            }
            let (u, v) = intrinsics.project(&p);
            let (u, v) = (snap(u), snap(v));
            if !(0.0..=wmax).contains(&u) || !(0.0..=hmax).contains(&v) {
                taps.push(None);
                continue;
            }
            let x0 = (u.floor() as usize).min(width - 1);
            let y0 = (v.floor() as usize).min(height - 1);
            let x1 = (x0 + 1).min(width - 1);
            let y1 = (y0 + 1).min(height - 1);
            let ax = u - x0 as f64;
            let ay = v - y0 as f64;
            taps.push(Some(Tap {
                idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
                w: [
                    (1.0 - ax) * (1.0 - ay),
                    ax * (1.0 - ay),
                    (1.0 - ax) * ay,
                    ax * ay,
                ],
            }));
        }
    }
    Ok(taps)
}

impl Tap {
    #[inline]
    pub fn sample(&self, plane: &[f32]) -> f64 {
        let mut acc = 0.0;
        for k in 0..4 {
            // Zero-weight taps are skipped so exact hits reproduce the source value bit-for-bit.
            if self.w[k] != 0.0 {
                acc += self.w[k] * f64::from(plane[self.idx[k]]);
            }
        }
        acc
    }
}

/// Inverse-warps `source` (C×H×W, or H×W as one channel) into the target frame.
pub fn warp(
    source: &Grid,
    pose: &Pose,
    depth: DepthSource<'_>,
    intrinsics: &Intrinsics,
) -> Result<Warped, GeometryError> {
    intrinsics.validate()?;
    pose.validate()?;
    let (channels, height, width) = source.as_chw()?;
    let taps = reprojection_taps(height, width, &pose.to_matrix(), depth, intrinsics)?;
    let plane = height * width;
    let mut image = vec![0.0f32; channels * plane];
    let mut mask = vec![0.0f32; plane];
    for (i, tap) in taps.iter().enumerate() {
        if let Some(tap) = tap {
            mask[i] = 1.0;
            for c in 0..channels {
                image[c * plane + i] = tap.sample(&source.data()[c * plane..(c + 1) * plane]) as f32;
            }
        }
    }
    Ok(Warped {
        image: Grid::new(source.shape().to_vec(), image)?,
        mask: Grid::new(vec![height, width], mask)?,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rodrigues(theta: [f64; 3]) -> [[f64; 3]; 3] {
        let angle = (theta[0] * theta[0] + theta[1] * theta[1] + theta[2] * theta[2]).sqrt();
        if angle == 0.0 {
            return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        }
        let k = [theta[0] / angle, theta[1] / angle, theta[2] / angle];
        let (s, c) = angle.sin_cos();
        let mut r = [[0.0; 3]; 3];
        let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                let eye = if i == j { 1.0 } else { 0.0 };
                r[i][j] = c * eye + s * kx[i][j] + (1.0 - c) * k[i] * k[j];
            }
        }
        r
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let theta = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let trans = [
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        ];
        Pose::new(theta, trans).unwrap()
    }

    #[test]
    fn zero_rotation_is_identity() {
        let m = pose_to_matrix(&Pose::translation([1.0, -2.0, 3.0]));
        assert_eq!(m.rotation, Matrix3::identity());
        assert_eq!(m.translation, Vector3::new(1.0, -2.0, 3.0));
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let m = pose_to_matrix(&Pose::new([0.0, 0.0, PI / 2.0], [0.0; 3]).unwrap());
        let y = m.rotation * Vector3::x();
        assert!((y - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn exponential_map_matches_rodrigues_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let m = pose_to_matrix(&pose);
            let reference = rodrigues(pose.theta);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m.rotation[(i, j)] - reference[i][j]).abs() < 1e-12);
                }
            }
            let gram = m.rotation.transpose() * m.rotation;
            assert!((gram - Matrix3::identity()).abs().max() < 1e-12);
            assert!((m.rotation.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_laws() {
        assert_eq!(invert_pose(&Pose::IDENTITY).trans, [0.0; 3]);
        let inv = invert_pose(&Pose::translation([1.0, 2.0, -3.0]));
        assert_eq!(inv.trans, [-1.0, -2.0, 3.0]);
        assert_eq!(inv.theta, [0.0; 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let inv = invert_pose(&p);
            // Composition computed directly on matrices, independent of Pose::compose.
            let a = rodrigues(p.theta);
            let b = rodrigues(inv.theta);
            let mut r = [[0.0; 3]; 3];
            let mut t = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        r[i][j] += a[i][k] * b[k][j];
                    }
                    t[i] += a[i][j] * inv.trans[j];
                }
                t[i] += p.trans[i];
            }
            for i in 0..3 {
                for j in 0..3 {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    assert!((r[i][j] - eye).abs() < 1e-10);
                }
                assert!(t[i].abs() < 1e-10);
            }
            let c = p.compose(&inv);
            let n = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!(n(c.theta) < 1e-10 && n(c.trans) < 1e-10);
        }
    }

    #[test]
    fn angle_is_wrapped_into_canonical_range() {
        let p = Pose::new([0.0, 0.0, 1.5 * PI], [0.0; 3]).unwrap();
        assert!((p.theta[2] + 0.5 * PI).abs() < 1e-12);
        let a = pose_to_matrix(&p);
        let b = rodrigues([0.0, 0.0, 1.5 * PI]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.rotation[(i, j)] - b[i][j]).abs() < 1e-12);
            }
        }
        assert!(Pose::new([f64::NAN, 0.0, 0.0], [0.0; 3]).is_err());
    }

    fn camera() -> Intrinsics {
        Intrinsics::new(50.0, 50.0, 15.5, 11.5).unwrap()
    }

    #[test]
    fn identity_pose_reproduces_source() {
        let src = Grid::from_fn3(2, 24, 32, |c, y, x| ((c * 7 + y * 3 + x) as f32 * 0.37).sin()).unwrap();
        let depth = Grid::from_fn2(24, 32, |y, x| 2.0 + 0.1 * (x + y) as f32).unwrap();
        let out = warp(&src, &Pose::IDENTITY, DepthSource::Map(&depth), &camera()).unwrap();
        assert_eq!(out.image, src);
        assert!(out.mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn x_translation_shifts_by_disparity() {
        let (h, w) = (24usize, 64usize);
        let k = camera();
        let z = 10.0;
        let tx = 0.37;
        let shift = k.fx * tx / z;
        let freq = 0.01;
        let pattern = |x: f64, y: f64| (2.0 * PI * freq * (x + 0.5 * y) + 0.3).sin();
        let src = Grid::from_fn2(h, w, |y, x| pattern(x as f64, y as f64) as f32).unwrap();
        let out = warp(&src, &Pose::translation([tx, 0.0, 0.0]), DepthSource::Constant(z), &k).unwrap();
        for y in 0..h {
            for x in 0..w {
                let valid = (x as f64 + shift) <= (w - 1) as f64;
                assert_eq!(out.mask.at2(y, x) == 1.0, valid, "pixel ({y},{x})");
                if valid {
                    let expected = pattern(x as f64 + shift, y as f64);
                    assert!((f64::from(out.image.at2(y, x)) - expected).abs() < 1e-3);
                } else {
                    assert_eq!(out.image.at2(y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn turning_away_invalidates_most_pixels() {
        let (h, w) = (24usize, 32usize);
        let k = camera();
        let pose = Pose::new([0.0, PI / 2.0, 0.0], [0.0; 3]).unwrap();
        let src = Grid::filled(vec![h, w], 1.0).unwrap();
        let out = warp(&src, &pose, DepthSource::Constant(5.0), &k).unwrap();

        // Brute-force reprojection of the lattice with the closed-form rotation.
        let r = rodrigues(pose.theta);
        let mut expected_valid = 0;
        for y in 0..h {
            for x in 0..w {
                let ray = [(x as f64 - k.cx) / k.fx * 5.0, (y as f64 - k.cy) / k.fy * 5.0, 5.0];
                let p: Vec<f64> = (0..3).map(|i| (0..3).map(|j| r[i][j] * ray[j]).sum()).collect();
                if p[2] > 0.0 {
                    let u = k.fx * p[0] / p[2] + k.cx;
                    let v = k.fy * p[1] / p[2] + k.cy;
                    if (0.0..=(w - 1) as f64).contains(&u) && (0.0..=(h - 1) as f64).contains(&v) {
                        expected_valid += 1;
                    }
                }
            }
        }
        let valid = out.mask.data().iter().filter(|&&m| m == 1.0).count();
        assert_eq!(valid, expected_valid);
        assert!(valid * 10 < h * w);
    }

    #[test]
    fn rejects_non_positive_depth_and_bad_shapes() {
        let src = Grid::filled(vec![4, 4], 1.0).unwrap();
        let mut d = vec![1.0f32; 16];
        d[5] = 0.0;
        let depth = Grid::new(vec![4, 4], d).unwrap();
        let err = warp(&src, &Pose::IDENTITY, DepthSource::Map(&depth), &camera()).unwrap_err();
        assert!(matches!(err, GeometryError::NonPositiveDepth { y: 1, x: 1, .. }));
        let depth = Grid::filled(vec![4, 5], 1.0).unwrap();
        assert!(matches!(
            warp(&src, &Pose::IDENTITY, DepthSource::Map(&depth), &camera()),
            Err(GeometryError::DepthShape { .. })
        ));
        assert!(warp(&src, &Pose::IDENTITY, DepthSource::Constant(-1.0), &camera()).is_err());
    }

    #[test]
    fn warp_is_linear_and_mask_ignores_values() {
        let k = camera();
        let pose = Pose::new([0.01, -0.02, 0.005], [0.2, -0.1, 0.05]).unwrap();
        let f = Grid::from_fn3(2, 24, 32, |c, y, x| ((c + y * 5 + x * 3) as f32 * 0.21).cos()).unwrap();
        let g = Grid::from_fn3(2, 24, 32, |c, y, x| ((c * 3 + y + x * 7) as f32 * 0.13).sin()).unwrap();
        let (a, b) = (1.5f32, -0.75f32);
        let mix = f.zip_map(&g, |u, v| a * u + b * v).unwrap();
        let wf = warp(&f, &pose, DepthSource::Constant(4.0), &k).unwrap();
        let wg = warp(&g, &pose, DepthSource::Constant(4.0), &k).unwrap();
        let wm = warp(&mix, &pose, DepthSource::Constant(4.0), &k).unwrap();
        for i in 0..mix.len() {
            let lin = a * wf.image.data()[i] + b * wg.image.data()[i];
            assert!((wm.image.data()[i] - lin).abs() < 1e-5);
        }
        assert_eq!(wf.mask, wg.mask);
        assert_eq!(wf.mask, wm.mask);
    }
}
