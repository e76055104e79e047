//! The property suite behind `rdk selfcheck`.
//!
//! Every check is seeded, so the report is byte-identical across runs. The
//! report carries measured values only; no timings.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cost_volume::{best_index, build_cost_volume, CostMode, DepthCandidates};
use crate::dist_prior::{
    aggregate_reference, kl_loss, kl_loss_depth_grad_f64, soft_histogram, soft_histogram_grad, telescoped_mass,
    Histogram, HistogramSpec, KL_FLOOR,
};
use crate::geometry::{warp, DepthSource, Pose};
use crate::gradcheck::{max_relative_error, perturb, relative_step};
use crate::losses::{assemble_real, RealTerms, RealWeights};
use crate::metrics::{evaluate, EvalRange, MetricRow};
use crate::reweighting::{consistency_map, loss_consistent_depth, loss_distill, DEFAULT_BETA, DEFAULT_EPS};
use crate::scene_oracle::{render, PlaneKind, RenderedScene, SceneSpec};
use crate::tensor::Grid;

/// Histogram spec used with the relative step `1e-3 * max(1, |D|)`.
///
/// Central-difference truncation error scales with `(h / a)^2`. At
/// `h <= 0.079` and `a = 38.25` it stays near 1e-6, well under the tolerance.
pub fn gradcheck_spec() -> HistogramSpec {
    HistogramSpec::new(3.5, 80.0, 8, (80.0 - 3.5) / 2.0).expect("valid spec")
}

/// Absolute step used for the default-bandwidth gradient checks.
pub const FINE_STEP: f64 = 5e-5;

const GRAD_TOL: f64 = 1e-4;
const GRAD_MAPS: usize = 20;
const GRAD_SIZE: usize = 16;
const KINK_EPS: f64 = 1e-6;
const BORDER: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub measured: String,
    pub limit: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub scene: String,
    pub candidates: String,
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

impl fmt::Display for SelfCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scene:      {}", self.scene)?;
        writeln!(f, "candidates: {}", self.candidates)?;
        writeln!(f)?;
        let name_w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(5);
        writeln!(f, "{:>2}  {:<name_w$}  {:>12}  {:>12}  result", "#", "check", "measured", "limit")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:>2}  {:<name_w$}  {:>12}  {:>12}  {}",
                c.criterion,
                c.name,
                c.measured,
                c.limit,
                if c.passed { "PASS" } else { "FAIL" }
            )?;
            if !c.detail.is_empty() {
                writeln!(f, "    {:<name_w$}  {}", "", c.detail)?;
            }
        }
        writeln!(f)?;
        let n = self.checks.len();
        if self.passed() {
            write!(f, "all {n} checks passed")
        } else {
            write!(f, "{} of {n} checks failed", self.failures())
        }
    }
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

fn check(criterion: u8, name: &str, passed: bool, measured: String, limit: String) -> CheckResult {
    CheckResult {
        criterion,
        name: name.to_string(),
        passed,
        measured,
        limit,
        detail: String::new(),
    }
}

fn failed(criterion: u8, name: &str, err: impl fmt::Display) -> CheckResult {
    CheckResult {
        criterion,
        name: name.to_string(),
        passed: false,
        measured: "error".into(),
        limit: "-".into(),
        detail: err.to_string(),
    }
}

/// Runs every check against `spec` and `candidates`.
pub fn selfcheck(spec: &SceneSpec, candidates: &DepthCandidates) -> SelfCheckReport {
    let mut checks = Vec::new();
    checks.extend(check_constants());
    checks.extend(check_gradients());
    checks.extend(check_telescoping());
    checks.extend(check_kl());
    match render(spec) {
        Ok(scene) => {
            checks.extend(check_plane_sweep(spec, &scene, candidates));
            checks.extend(check_warp(spec, &scene));
        }
        Err(e) => {
            checks.push(failed(5, "scene render", &e));
            checks.push(failed(6, "scene render", &e));
        }
    }
    checks.extend(check_consistency());
    checks.extend(check_assembly());
    checks.extend(check_metrics());

    let kind = match spec.kind {
        PlaneKind::FrontoParallel => "fronto-parallel",
        PlaneKind::SlopedPlane => "sloped",
    };
    let v = candidates.values();
    SelfCheckReport {
        scene: format!(
            "{kind} plane, depth {} m, {}x{}x{}, motion t = {:?}, theta = {:?}",
            spec.depth,
            spec.channels(),
            spec.height,
            spec.width,
            spec.motion.trans,
            spec.motion.theta
        ),
        candidates: format!("{} in [{}, {}] m", v.len(), v[0], v[v.len() - 1]),
        checks,
    }
}

fn check_constants() -> Vec<CheckResult> {
    let spec = HistogramSpec::default();
    let got = [spec.bin_width(), spec.center(0), spec.bandwidth];
    let want = [0.765, 3.8825, 0.03825];
    let exact = got == want;
    let mut c = check(1, "histogram constants L, b0, a", exact, "exact".into(), "exact".into());
    if !exact {
        c.measured = "mismatch".into();
    }
    c.detail = format!("L = {}, b0 = {}, a = {}", got[0], got[1], got[2]);
    vec![c]
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f32, hi: f32) -> Grid {
    Grid::from_fn2(h, w, |_, _| rng.random_range(lo..hi)).expect("non-empty map")
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One pixel's contribution to every bin (without the 1/HW factor).
fn pixel_bins(d: f64, spec: &HistogramSpec) -> Vec<f64> {
    let a = spec.bandwidth;
    let l = spec.bin_width();
    (0..spec.bins)
        .map(|n| {
            let lo = spec.d_min + n as f64 * l;
            logistic((d - lo) / a) - logistic((d - lo - l) / a)
        })
        .collect()
}

fn naive_kl(p_raw: &[f64], q_raw: &[f64]) -> f64 {
    let smooth = |v: &[f64]| {
        let s: Vec<f64> = v.iter().map(|x| x + KL_FLOOR).collect();
        let t: f64 = s.iter().sum();
        s.into_iter().map(|x| x / t).collect::<Vec<_>>()
    };
    let (p, q) = (smooth(p_raw), smooth(q_raw));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Finite-difference Jacobian of the soft histogram against the analytic one.
fn histogram_grad_error(depth: &Grid, spec: &HistogramSpec, step: &dyn Fn(f64) -> f64) -> Result<f64, String> {
    let analytic = soft_histogram_grad(depth, spec).map_err(|e| e.to_string())?;
    let n_px = depth.len();
    let inv = 1.0 / n_px as f64;
    let mut numeric = vec![0.0f64; spec.bins * n_px];
    for (i, &d) in depth.data().iter().enumerate() {
        let (plus, minus, taken) = perturb(d, step(f64::from(d)));
        let bp = pixel_bins(f64::from(plus), spec);
        let bm = pixel_bins(f64::from(minus), spec);
        for n in 0..spec.bins {
            numeric[n * n_px + i] = (bp[n] - bm[n]) * inv / taken;
        }
    }
    let analytic: Vec<f64> = analytic.data().iter().map(|&g| f64::from(g)).collect();
    Ok(max_relative_error(&analytic, &numeric))
}

fn kl_grad_error(depth: &Grid, spec: &HistogramSpec, day: &Histogram, step: &dyn Fn(f64) -> f64) -> Result<f64, String> {
    let (_, analytic) = kl_loss_depth_grad_f64(depth, spec, day).map_err(|e| e.to_string())?;
    let inv = 1.0 / depth.len() as f64;
    let base: Vec<Vec<f64>> = depth.data().iter().map(|&d| pixel_bins(f64::from(d), spec)).collect();
    let mut p = vec![0.0f64; spec.bins];
    for bins in &base {
        for (acc, b) in p.iter_mut().zip(bins) {
            *acc += b * inv;
        }
    }
    let numeric: Vec<f64> = depth
        .data()
        .iter()
        .zip(&base)
        .map(|(&d, own)| {
            let (plus, minus, taken) = perturb(d, step(f64::from(d)));
            let shifted = |v: f32| {
                let b = pixel_bins(f64::from(v), spec);
                p.iter().zip(&b).zip(own).map(|((pn, bn), on)| pn + (bn - on) * inv).collect::<Vec<_>>()
            };
            (naive_kl(&shifted(plus), &day.probs) - naive_kl(&shifted(minus), &day.probs)) / taken
        })
        .collect();
    Ok(max_relative_error(&analytic, &numeric))
}

/// `term(v)` is one pixel's loss contribution; `partner` marks the kink.
fn pointwise_grad_error(
    values: &Grid,
    partners: &Grid,
    analytic: &Grid,
    term: &dyn Fn(usize, f64) -> f64,
) -> (f64, usize) {
    let inv = 1.0 / values.len() as f64;
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut skipped = 0;
    for (i, (&v, &p)) in values.data().iter().zip(partners.data()).enumerate() {
        let h = relative_step(f64::from(v));
        if (f64::from(v) - f64::from(p)).abs() <= h + KINK_EPS {
            skipped += 1;
            continue;
        }
        let (plus, minus, taken) = perturb(v, h);
        n.push((term(i, f64::from(plus)) - term(i, f64::from(minus))) * inv / taken);
        a.push(f64::from(analytic.data()[i]));
    }
    (max_relative_error(&a, &n), skipped)
}

fn check_gradients() -> Vec<CheckResult> {
    let coarse = gradcheck_spec();
    let fine = HistogramSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let maps: Vec<Grid> = (0..GRAD_MAPS)
        .map(|_| random_map(&mut rng, GRAD_SIZE, GRAD_SIZE, 4.0, 79.0))
        .collect();
    let partners: Vec<Grid> = (0..GRAD_MAPS)
        .map(|_| random_map(&mut rng, GRAD_SIZE, GRAD_SIZE, 4.0, 79.0))
        .collect();
    let weights: Vec<Grid> = (0..GRAD_MAPS)
        .map(|_| random_map(&mut rng, GRAD_SIZE, GRAD_SIZE, 1.0, 2.0))
        .collect();
    // Prior drawn uniformly in inverse depth, so it differs from the maps and
    // the KL gradient is checked away from its stationary point.
    let refs: Vec<Grid> = (0..4)
        .map(|_| random_map(&mut rng, GRAD_SIZE, GRAD_SIZE, 1.0 / 79.0, 1.0 / 4.0).map(|v| 1.0 / v))
        .collect();

    let rel = |d: f64| relative_step(d);
    let fixed = |_: f64| FINE_STEP;
    let limit = sci(GRAD_TOL);
    let mut out = Vec::new();

    let mut run = |name: &str, f: &dyn Fn(usize) -> Result<(f64, usize), String>| {
        let mut worst = 0.0f64;
        let mut skipped = 0;
        for i in 0..GRAD_MAPS {
            match f(i) {
                Ok((e, s)) => {
                    worst = worst.max(e);
                    skipped += s;
                }
                Err(e) => {
                    out.push(failed(2, name, e));
                    return;
                }
            }
        }
        let mut c = check(2, name, worst < GRAD_TOL, sci(worst), limit.clone());
        c.detail = format!("{GRAD_MAPS} maps {GRAD_SIZE}x{GRAD_SIZE}");
        if skipped > 0 {
            c.detail.push_str(&format!(", {skipped} tie pixels skipped"));
        }
        out.push(c);
    };

    let coarse_day = aggregate_reference(&refs, &coarse);
    let fine_day = aggregate_reference(&refs, &fine);
    run("soft_histogram grad, N=8 a=38.25", &|i| {
        histogram_grad_error(&maps[i], &coarse, &rel).map(|e| (e, 0))
    });
    run("kl_loss_depth_grad, N=8 a=38.25", &|i| {
        let day = coarse_day.as_ref().map_err(|e| e.to_string())?;
        kl_grad_error(&maps[i], &coarse, day, &rel).map(|e| (e, 0))
    });
    run("soft_histogram grad, default, h=5e-5", &|i| {
        histogram_grad_error(&maps[i], &fine, &fixed).map(|e| (e, 0))
    });
    run("kl_loss_depth_grad, default, h=5e-5", &|i| {
        let day = fine_day.as_ref().map_err(|e| e.to_string())?;
        kl_grad_error(&maps[i], &fine, day, &fixed).map(|e| (e, 0))
    });
    run("loss_distill grad", &|i| {
        let (day, syn) = (&partners[i], &maps[i]);
        let g = loss_distill(day, syn).map_err(|e| e.to_string())?;
        let term = |k: usize, s: f64| {
            let t = f64::from(day.data()[k]);
            (t - s).abs() / s
        };
        Ok(pointwise_grad_error(syn, day, &g.grad, &term))
    });
    run("loss_consistent_depth grad", &|i| {
        let (real, syn, w) = (&maps[i], &partners[i], &weights[i]);
        let g = loss_consistent_depth(real, syn, w).map_err(|e| e.to_string())?;
        let term = |k: usize, r: f64| {
            let (s, wk) = (f64::from(syn.data()[k]), f64::from(w.data()[k]));
            wk * (r - s).abs() / r
        };
        Ok(pointwise_grad_error(real, syn, &g.grad, &term))
    });
    out
}

fn check_telescoping() -> Vec<CheckResult> {
    let spec = HistogramSpec::default();
    let l = spec.bin_width();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let mut worst_identity = 0.0f64;
    let mut min_mass = f64::INFINITY;
    let mut errors = Vec::new();
    for k in 0..20 {
        let wide = random_map(&mut rng, 16, 16, 0.5, 95.0);
        let inner = random_map(&mut rng, 16, 16, (spec.d_min + 5.0 * l) as f32, (spec.d_max - 5.0 * l) as f32);
        for (depth, is_inner) in [(&wide, false), (&inner, true)] {
            match (soft_histogram(depth, &spec), telescoped_mass(depth, &spec)) {
                (Ok(h), Ok(t)) => {
                    worst_identity = worst_identity.max((h.mass() - t).abs());
                    if is_inner {
                        min_mass = min_mass.min(h.mass());
                    }
                }
                (Err(e), _) | (_, Err(e)) => errors.push(format!("map {k}: {e}")),
            }
        }
    }
    if let Some(e) = errors.first() {
        return vec![failed(3, "telescoping identity", e)];
    }
    vec![
        check(3, "sum P = boundary sigmoids", worst_identity <= 1e-9, sci(worst_identity), sci(1e-9)),
        check(
            3,
            "mass with depths inside 5L margin",
            min_mass > 1.0 - 1e-3,
            format!("{min_mass:.9}"),
            "> 0.999".into(),
        ),
    ]
}

fn random_histogram(rng: &mut ChaCha8Rng, spec: &HistogramSpec) -> Histogram {
    let mut probs: Vec<f64> = (0..spec.bins)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() })
        .collect();
    let s: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= s);
    Histogram::new(*spec, probs).expect("valid histogram")
}

fn check_kl() -> Vec<CheckResult> {
    let spec = HistogramSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    let mut max_self = 0.0f64;
    let mut min_pair = f64::INFINITY;
    for _ in 0..100 {
        let p = random_histogram(&mut rng, &spec);
        let q = random_histogram(&mut rng, &spec);
        let (Ok(pp), Ok(pq)) = (kl_loss(&p, &p), kl_loss(&p, &q)) else {
            return vec![failed(4, "kl_loss", "kl_loss rejected a valid pair")];
        };
        max_self = max_self.max(pp.value.abs());
        min_pair = min_pair.min(pq.value);
    }
    let mut point = vec![0.0; spec.bins];
    point[0] = 1.0;
    let uniform = vec![1.0 / spec.bins as f64; spec.bins];
    let pm = Histogram::new(spec, point)
        .and_then(|p| Histogram::new(spec, uniform).and_then(|u| kl_loss(&p, &u)))
        .map(|k| k.value);
    let target = (spec.bins as f64).ln();
    let mut out = vec![
        check(4, "KL(p, p) on 100 pairs", max_self <= 1e-10, sci(max_self), sci(1e-10)),
        check(4, "min KL(p, q) on 100 pairs", min_pair >= -1e-12, sci(min_pair), ">= -1e-12".into()),
    ];
    match pm {
        Ok(v) => {
            let rel = (v - target).abs() / target;
            let mut c = check(4, "point mass vs uniform", rel < 0.02, sci(rel), "2.000e-2".into());
            c.detail = format!("KL = {v:.6}, log {} = {target:.6}", spec.bins);
            out.push(c);
        }
        Err(e) => out.push(failed(4, "point mass vs uniform", e)),
    }
    out
}

fn check_plane_sweep(spec: &SceneSpec, scene: &RenderedScene, candidates: &DepthCandidates) -> Vec<CheckResult> {
    let (h, w) = (spec.height, spec.width);
    let true_mask = match warp(&scene.feat_prev, &scene.pose, DepthSource::Map(&scene.depth_gt), &spec.camera) {
        Ok(wp) => wp.mask,
        Err(e) => return vec![failed(5, "plane sweep", e)],
    };
    let truth: Vec<f64> = scene.depth_gt.data().iter().map(|&z| f64::from(z)).collect();
    let nearest: Vec<usize> = truth.iter().map(|&z| candidates.nearest_index(z)).collect();
    let interior = |i: usize| {
        let (y, x) = (i / w, i % w);
        y >= BORDER && y + BORDER < h && x >= BORDER && x + BORDER < w && true_mask.data()[i] > 0.5
    };
    let values = candidates.values();
    let quantized = truth
        .iter()
        .zip(&nearest)
        .filter(|(z, &k)| ((*z - values[k]) / *z).abs() > 1e-6)
        .count();

    let mut out = Vec::new();
    for (mode, name) in [(CostMode::Difference, "plane sweep argmin, difference"), (CostMode::Dot, "plane sweep argmax, dot")] {
        let best = match build_cost_volume(&scene.feat_t, &scene.feat_prev, &scene.pose, candidates, &spec.camera, mode)
            .and_then(|cv| best_index(&cv))
        {
            Ok(b) => b,
            Err(e) => {
                out.push(failed(5, name, e));
                continue;
            }
        };
        let (mut hits, mut total) = (0usize, 0usize);
        for i in (0..h * w).filter(|&i| interior(i)) {
            total += 1;
            hits += usize::from(best[i] == nearest[i]);
        }
        let rate = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
        let mut c = check(5, name, total > 0 && rate >= 0.99, format!("{:.2}%", 100.0 * rate), ">= 99.00%".into());
        c.detail = format!("{hits}/{total} interior pixels");
        if quantized > 0 {
            if spec.kind == PlaneKind::FrontoParallel {
                let k = nearest[0];
                c.detail.push_str(&format!(
                    "; quantized: true depth {} m, nearest candidate {} = {:.4} m",
                    spec.depth, k, values[k]
                ));
            } else {
                c.detail
                    .push_str(&format!("; quantized: {quantized} pixels have no exact candidate"));
            }
        }
        out.push(c);
    }
    out
}

fn check_warp(spec: &SceneSpec, scene: &RenderedScene) -> Vec<CheckResult> {
    let k = &spec.camera;
    let amplitude = spec.texture.amplitude;
    let round_trip = || -> Result<(f64, usize), crate::geometry::GeometryError> {
        let back = warp(&scene.feat_t, &scene.pose.inverse(), DepthSource::Map(&scene.depth_prev), k)?;
        let again = warp(&back.image, &scene.pose, DepthSource::Map(&scene.depth_gt), k)?;
        let carried = warp(&back.mask, &scene.pose, DepthSource::Map(&scene.depth_gt), k)?;
        let plane = spec.height * spec.width;
        let c = spec.channels();
        let (mut sum, mut n) = (0.0f64, 0usize);
        for i in 0..plane {
            if again.mask.data()[i] > 0.5 && carried.image.data()[i] > 1.0 - 1e-6 {
                for ch in 0..c {
                    let j = ch * plane + i;
                    sum += (f64::from(again.image.data()[j]) - f64::from(scene.feat_t.data()[j])).abs();
                }
                n += 1;
            }
        }
        Ok((if n == 0 { f64::INFINITY } else { sum / (n * c) as f64 }, n))
    };
    let mut out = Vec::new();
    match round_trip() {
        Ok((mae, n)) => {
            let rel = mae / amplitude;
            let mut c = check(6, "warp round trip MAE / amplitude", rel < 1e-2, sci(rel), sci(1e-2));
            c.detail = format!("{n} doubly-valid pixels");
            out.push(c);
        }
        Err(e) => out.push(failed(6, "warp round trip", e)),
    }
    match warp(&scene.feat_t, &Pose::IDENTITY, DepthSource::Map(&scene.depth_gt), k) {
        Ok(id) => {
            let exact = id.image.data().iter().zip(scene.feat_t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                && id.mask.data().iter().all(|&m| m == 1.0);
            let mut c = check(6, "identity warp", exact, if exact { "bit-exact" } else { "differs" }.into(), "bit-exact".into());
            c.detail = String::new();
            out.push(c);
        }
        Err(e) => out.push(failed(6, "identity warp", e)),
    }
    out
}

/// Integers `(p, q)` below 2^24 with `p / q` a best rational approximation of `x`.
fn best_ratio(x: f64) -> (f64, f64) {
    let limit = f64::from(1u32 << 24);
    let (mut p0, mut q0, mut p1, mut q1) = (0.0, 1.0, 1.0, 0.0);
    let mut r = x;
    for _ in 0..40 {
        let a = r.floor();
        let (p2, q2) = (a * p1 + p0, a * q1 + q0);
        if p2 >= limit || q2 >= limit {
            break;
        }
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
        let frac = r - a;
        if frac < 1e-15 {
            break;
        }
        r = 1.0 / frac;
    }
    (p1, q1)
}

fn check_consistency() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0007);
    let d = random_map(&mut rng, 16, 16, 4.0, 79.0);
    let mut out = Vec::new();
    match consistency_map(&d, &d, DEFAULT_BETA, DEFAULT_EPS) {
        Ok(m) => {
            let ok = m.confidence.data().iter().all(|&c| c == 1.0) && m.weights.data().iter().all(|&w| w == 2.0);
            out.push(check(
                7,
                "identical inputs: C = 1, W = 2",
                ok,
                if ok { "exact" } else { "differs" }.into(),
                "exact".into(),
            ));
        }
        Err(e) => out.push(failed(7, "identical inputs", e)),
    }

    // Depths p, q with (p - q) / q = ln 2 up to f64 rounding, both exact in f32.
    let (p, q) = best_ratio(1.0 + std::f64::consts::LN_2);
    let shift = (q.log2().floor() - 3.0).exp2();
    let (d_day, d_syn) = ((p / shift) as f32, (q / shift) as f32);
    let rel = (f64::from(d_day) - f64::from(d_syn)).abs() / f64::from(d_syn);
    let conf = crate::reweighting::confidence(rel, DEFAULT_BETA);
    let err = (conf - 0.5).abs();
    let mut c = check(7, "relative error ln 2 gives C = 0.5", err <= 1e-12, sci(err), sci(1e-12));
    c.detail = format!("d_syn = {d_syn}, d_day = {d_day}, relative error - ln 2 = {:.1e}", rel - std::f64::consts::LN_2);
    out.push(c);
    out
}

fn check_assembly() -> Vec<CheckResult> {
    let unit = RealTerms {
        consistent_depth: 1.0,
        distribution: 1.0,
        cost_volume: 1.0,
        pose: 1.0,
    };
    let mut out = Vec::new();
    match assemble_real(&unit, &RealWeights::default()) {
        Ok(r) => {
            let rel = (r.total - 3.01).abs() / 3.01;
            out.push(check(8, "unit terms, default weights = 3.01", rel <= 1e-12, sci(rel), sci(1e-12)));
        }
        Err(e) => out.push(failed(8, "unit terms", e)),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0008);
    let mut worst = 0.0f64;
    let terms = |rng: &mut ChaCha8Rng| RealTerms {
        consistent_depth: rng.random(),
        distribution: rng.random(),
        cost_volume: rng.random(),
        pose: rng.random(),
    };
    let weights = |rng: &mut ChaCha8Rng| RealWeights {
        alpha1: rng.random(),
        alpha2: rng.random(),
        alpha3: rng.random(),
        alpha4: rng.random(),
    };
    let total = |t: &RealTerms, w: &RealWeights| assemble_real(t, w).map(|r| r.total).unwrap_or(f64::NAN);
    for _ in 0..1000 {
        let (t, u, w, v) = (terms(&mut rng), terms(&mut rng), weights(&mut rng), weights(&mut rng));
        let tu = RealTerms {
            consistent_depth: t.consistent_depth + u.consistent_depth,
            distribution: t.distribution + u.distribution,
            cost_volume: t.cost_volume + u.cost_volume,
            pose: t.pose + u.pose,
        };
        let wv = RealWeights {
            alpha1: w.alpha1 + v.alpha1,
            alpha2: w.alpha2 + v.alpha2,
            alpha3: w.alpha3 + v.alpha3,
            alpha4: w.alpha4 + v.alpha4,
        };
        let in_terms = total(&tu, &w) - (total(&t, &w) + total(&u, &w));
        let in_weights = total(&t, &wv) - (total(&t, &w) + total(&t, &v));
        let scale_t = total(&tu, &w).abs().max(f64::MIN_POSITIVE);
        let scale_w = total(&t, &wv).abs().max(f64::MIN_POSITIVE);
        worst = worst.max((in_terms / scale_t).abs()).max((in_weights / scale_w).abs());
    }
    out.push(check(8, "linearity in terms and weights", worst <= 1e-15, sci(worst), sci(1e-15)));
    out
}

fn naive_metrics(pred: &[f32], gt: &[f32], lo: f64, hi: f64) -> Option<MetricRow> {
    let mut rows = Vec::new();
    for (&p, &g) in pred.iter().zip(gt) {
        let g = f64::from(g);
        if !(g >= lo && g <= hi) {
            continue;
        }
        let p = f64::from(p).clamp(lo, hi);
        rows.push((p, g));
    }
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let abs_rel = rows.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n;
    let sq_rel = rows.iter().map(|(p, g)| (p - g) * (p - g) / g).sum::<f64>() / n;
    let rmse = (rows.iter().map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n).sqrt();
    let hits = rows.iter().filter(|(p, g)| (p / g).max(g / p) < 1.25).count();
    Some(MetricRow {
        abs_rel,
        sq_rel,
        rmse,
        delta1: 100.0 * hits as f64 / n,
        n_valid: rows.len(),
    })
}

fn row_distance(a: &MetricRow, b: &MetricRow) -> f64 {
    if a.n_valid != b.n_valid {
        return f64::INFINITY;
    }
    [
        (a.abs_rel - b.abs_rel).abs(),
        (a.sq_rel - b.sq_rel).abs(),
        (a.rmse - b.rmse).abs(),
        (a.delta1 - b.delta1).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn check_metrics() -> Vec<CheckResult> {
    let range = EvalRange::DRIVING;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0009);
    // Multiples of 1/8 below 64 m: 1.25 * gt is exact in f32 and stays in range.
    let gt = Grid::from_fn2(24, 32, |_, _| rng.random_range(8..512) as f32 / 8.0).expect("non-empty map");
    let scaled = |s: f32| gt.map(|g| g * s);
    let mut out = Vec::new();

    let fixtures = [
        ("pred = gt", 1.0f32, Some((0.0, 100.0))),
        ("pred = 1.2 gt", 1.2, Some((0.2, 100.0))),
        ("pred = 1.25 gt", 1.25, Some((f64::NAN, 0.0))),
    ];
    for (name, s, want) in fixtures {
        let pred = scaled(s);
        match evaluate(&pred, &gt, &range) {
            Ok(r) => {
                let (want_abs, want_d1) = want.expect("fixture");
                let exact_zero = s == 1.0 && r.abs_rel == 0.0 && r.sq_rel == 0.0 && r.rmse == 0.0;
                let abs_ok = want_abs.is_nan() || (r.abs_rel - want_abs).abs() <= 1e-6;
                let ok = abs_ok && r.delta1 == want_d1 && (s != 1.0 || exact_zero);
                let mut c = check(
                    9,
                    name,
                    ok,
                    format!("{:.4}/{:.1}", r.abs_rel, r.delta1),
                    if want_abs.is_nan() { format!("-/{want_d1:.1}") } else { format!("{want_abs:.4}/{want_d1:.1}") },
                );
                c.detail = format!(
                    "abs_rel {:.3e}, sq_rel {:.3e}, rmse {:.3e}, delta1 {}",
                    r.abs_rel, r.sq_rel, r.rmse, r.delta1
                );
                out.push(c);
            }
            Err(e) => out.push(failed(9, name, e)),
        }
    }

    let mut worst = 0.0f64;
    for k in 0..20 {
        let gt = random_map(&mut rng, 16, 16, 0.01, 100.0);
        let pred = random_map(&mut rng, 16, 16, 0.01, 100.0);
        for r in [EvalRange::DRIVING, EvalRange::ROBOTCAR] {
            let lib = evaluate(&pred, &gt, &r);
            let naive = naive_metrics(pred.data(), gt.data(), r.lo, r.hi);
            worst = match (lib, naive) {
                (Ok(a), Some(b)) => worst.max(row_distance(&a, &b)),
                (Err(_), None) => worst,
                _ => {
                    out.push(failed(9, "random fixtures vs naive loop", format!("fixture {k} disagrees on validity")));
                    return out;
                }
            };
        }
    }
    out.push(check(9, "random fixtures vs naive loop", worst <= 1e-12, sci(worst), sci(1e-12)));

    // Out-of-range ground truth must not influence anything.
    let base_gt = random_map(&mut rng, 8, 8, 0.2, 49.0);
    let base_pred = random_map(&mut rng, 8, 8, 0.2, 49.0);
    let mut ok = true;
    for (r, outside) in [(EvalRange::DRIVING, [0.05f32, 80.5, 1e3]), (EvalRange::ROBOTCAR, [0.05, 50.5, 79.0])] {
        let mut gt = base_gt.data().to_vec();
        let mut pred = base_pred.data().to_vec();
        for (j, v) in outside.iter().cycle().take(64).enumerate() {
            gt.push(*v);
            pred.push(1.0 + j as f32);
        }
        let padded = (Grid::new(vec![gt.len()], gt), Grid::new(vec![pred.len()], pred));
        let (Ok(gt_p), Ok(pred_p)) = padded else {
            ok = false;
            continue;
        };
        match (evaluate(&pred_p, &gt_p, &r), evaluate(&base_pred, &base_gt, &r)) {
            (Ok(a), Ok(b)) => ok &= a == b,
            _ => ok = false,
        }
    }
    out.push(check(
        9,
        "range masks 0.1-80 and 0.1-50",
        ok,
        if ok { "exact" } else { "differs" }.into(),
        "exact".into(),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continued_fraction_ratio() {
        let (p, q) = best_ratio(1.0 + std::f64::consts::LN_2);
        assert!(p < 16_777_216.0 && q < 16_777_216.0);
        assert!((p / q - 1.0 - std::f64::consts::LN_2).abs() < 1e-13);
    }

    #[test]
    fn two_candidate_sweep_completes() {
        let spec = SceneSpec::default();
        let cands = DepthCandidates::new(vec![3.5, 80.0]).unwrap();
        let report = selfcheck(&spec, &cands);
        assert!(report.checks.iter().any(|c| c.name.starts_with("plane sweep")));
        assert!(report.to_string().contains("checks"));
    }

    #[test]
    fn off_grid_candidates_are_flagged_as_quantized() {
        let spec = SceneSpec::default();
        let cands = DepthCandidates::inverse_uniform(3.5, 80.0, 32).unwrap();
        let report = selfcheck(&spec, &cands);
        let sweep: Vec<_> = report.checks.iter().filter(|c| c.criterion == 5).collect();
        assert_eq!(sweep.len(), 2);
        for c in sweep {
            assert!(c.passed, "{c:?}");
            assert!(c.detail.contains("quantized"), "{}", c.detail);
        }
    }
}
