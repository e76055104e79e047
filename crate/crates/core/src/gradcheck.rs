//! Central-difference helpers for checking analytic gradients.
//!
//! Inputs are `f32`, so a perturbed value is rounded before evaluation; the
//! difference quotient divides by the step that was actually taken.
//!
//! Relative error of one element is `|a - n| / max(|a|, |n|, floor)` with
//! `floor = REL_FLOOR * max_j |n_j|` over the compared array, which keeps
//! elements whose true gradient is (near) zero from dominating the maximum.

pub const REL_FLOOR: f64 = 1e-3;

/// Step `1e-3 * max(1, |v|)`.
pub fn relative_step(v: f64) -> f64 {
    1e-3 * v.abs().max(1.0)
}

/// `(v + h, v - h)` rounded to `f32`, and the step actually taken.
pub fn perturb(v: f32, h: f64) -> (f32, f32, f64) {
    let plus = (f64::from(v) + h) as f32;
    let minus = (f64::from(v) - h) as f32;
    (plus, minus, f64::from(plus) - f64::from(minus))
}

/// Largest element-wise relative error between analytic and numeric values.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = REL_FLOOR * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let denom = a.abs().max(n.abs()).max(floor);
            if denom == 0.0 {
                0.0
            } else {
                (a - n).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}
