//! Closed-form kernels for robust self-supervised depth estimation.
//!
//! * [`tensor`]: the `Grid` value type and the `RDT1` file format.
//! * [`geometry`]: pinhole camera, axis-angle poses, inverse warping.
//! * [`cost_volume`]: plane-sweep cost volumes and their distillation loss.
//! * [`dist_prior`]: differentiable depth histograms and the KL prior loss.
//! * [`reweighting`]: consistency confidence maps and pseudo-label losses.
//! * [`losses`]: photometric, smoothness and pose terms; stage objectives.
//! * [`metrics`]: AbsRel / SqRel / RMSE / δ₁ evaluation.
//! * [`scene_oracle`]: analytic plane scenes for verification.
//! * [`selfcheck`]: the property suite behind `rdk selfcheck`.
//! * [`cli`]: the `rdk` command-line front end.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cost_volume;
pub mod dist_prior;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod reweighting;
pub mod scene_oracle;
pub mod selfcheck;
pub mod tensor;

pub use tensor::Grid;
