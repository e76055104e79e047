//! The `rdk` command-line front end.
//!
//! Exit codes: 0 on success, 1 on domain errors (bad files, shape or spec
//! mismatches, failed self-checks), 2 on usage errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_volume::{
    best_depth, build_cost_volume, loss_cv, CandidateSpacing, CostMode, CostVolume, CostVolumeError, DepthCandidates,
};
use crate::dist_prior::{
    aggregate_reference, ascii_plot, kl_loss, kl_loss_depth_grad, Histogram, HistogramError, HistogramSpec,
    DEFAULT_BINS, DEFAULT_D_MAX, DEFAULT_D_MIN,
};
use crate::geometry::{warp, DepthSource, GeometryError, Intrinsics, Pose};
use crate::losses::{
    assemble_real, assemble_syn, loss_pose, LossError, LossWeights, PoseNorm, RealTerms, SynTerms,
};
use crate::metrics::{evaluate_pooled, evaluate_with, mean_rows, EvalOptions, EvalRange, MetricRow, MetricsError};
use crate::reweighting::{
    consistency_map, loss_consistent_depth, loss_distill, to_pgm, ReweightError, DEFAULT_BETA, DEFAULT_EPS,
};
use crate::scene_oracle::{render, PlaneKind, SceneError, SceneSpec};
use crate::selfcheck::selfcheck;
use crate::tensor::{atomic_write, read_tensor, write_tensor, Grid, TensorError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: TensorError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    CostVolume(#[from] CostVolumeError),
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error(transparent)]
    Reweight(#[from] ReweightError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("{0} self-check(s) failed")]
    SelfCheckFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rdk", version, about = "Depth-estimation kernels: warping, cost volumes, depth priors, losses, metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inverse-warp a source tensor into the target frame.
    Warp(WarpArgs),
    /// Build a plane-sweep cost volume.
    Costvol(CostvolArgs),
    /// Soft depth histogram of one or more depth maps.
    Hist(HistArgs),
    /// KL divergence between an adverse histogram and the daytime prior.
    Klloss(KlArgs),
    /// Consistency confidence map between two depth predictions.
    Consistency(ConsistencyArgs),
    /// Assemble a stage objective from its terms.
    Losses(LossesArgs),
    /// AbsRel / SqRel / RMSE / delta1 against ground truth.
    Metrics(MetricsArgs),
    /// Analytic plane scenes.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
    /// Run the property suite.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// Render a scene and write its tensors plus a JSON manifest.
    Gen(OracleGenArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct WarpArgs {
    /// Source tensor, C×H×W or H×W.
    #[arg(long)]
    pub source: PathBuf,
    /// Camera JSON: {"fx","fy","cx","cy","theta":[3],"trans":[3]}; the pose maps target to source.
    #[arg(long)]
    pub camera: PathBuf,
    /// Target-frame depth map, H×W.
    #[arg(long, conflicts_with = "const_depth", required_unless_present = "const_depth")]
    pub depth: Option<PathBuf>,
    /// One depth for every pixel, meters.
    #[arg(long)]
    pub const_depth: Option<f64>,
    /// Warped tensor output.
    #[arg(long)]
    pub out: PathBuf,
    /// Validity mask output (1 inside the source image, else 0).
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CandidateArgs {
    /// Nearest candidate depth, meters.
    #[arg(long, default_value_t = DEFAULT_D_MIN)]
    pub dmin: f64,
    /// Farthest candidate depth, meters.
    #[arg(long, default_value_t = DEFAULT_D_MAX)]
    pub dmax: f64,
    /// Number of depth candidates.
    #[arg(long, default_value_t = 32)]
    pub candidates: usize,
    /// Candidate spacing.
    #[arg(long, value_enum, default_value_t = CandidateSpacing::Inverse)]
    pub spacing: CandidateSpacing,
}

impl CandidateArgs {
    fn resolve(&self) -> Result<DepthCandidates, CliError> {
        Ok(DepthCandidates::spaced(self.dmin, self.dmax, self.candidates, self.spacing)?)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CostvolArgs {
    /// Current-frame features, C×H×W.
    #[arg(long)]
    pub feat_t: PathBuf,
    /// Previous-frame features, C×H×W.
    #[arg(long)]
    pub feat_prev: PathBuf,
    /// Camera JSON with the target-to-previous pose.
    #[arg(long)]
    pub camera: PathBuf,
    #[command(flatten)]
    pub candidates: CandidateArgs,
    /// Matching cost.
    #[arg(long, value_enum, default_value_t = CostMode::Difference)]
    pub mode: CostMode,
    /// Cost volume output, D×H×W.
    #[arg(long)]
    pub out: PathBuf,
    /// Sidecar JSON with candidates and mode [default: OUT with extension .json].
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Also write the per-pixel best candidate depth, H×W.
    #[arg(long)]
    pub best_depth: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct HistSpecArgs {
    /// Lower histogram bound d_min, meters.
    #[arg(long, default_value_t = DEFAULT_D_MIN)]
    pub dmin: f64,
    /// Upper histogram bound d_max, meters.
    #[arg(long, default_value_t = DEFAULT_D_MAX)]
    pub dmax: f64,
    /// Number of bins N.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Sigmoid bandwidth a [default: L/20 with L = (dmax - dmin)/N; 0.03825 for the defaults].
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

impl HistSpecArgs {
    fn resolve(&self) -> Result<HistogramSpec, CliError> {
        Ok(match self.bandwidth {
            Some(a) => HistogramSpec::new(self.dmin, self.dmax, self.bins, a)?,
            None => HistogramSpec::with_default_bandwidth(self.dmin, self.dmax, self.bins)?,
        })
    }
}

#[derive(Debug, Args, Serialize)]
pub struct HistArgs {
    /// Depth map(s); several maps give their equal-weight mean.
    #[arg(long, required = true, num_args = 1..)]
    pub depth: Vec<PathBuf>,
    #[command(flatten)]
    pub spec: HistSpecArgs,
    /// Write the JSON histogram here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the probabilities as a rank-1 tensor.
    #[arg(long)]
    pub tensor_out: Option<PathBuf>,
    /// Print an ASCII bar plot to standard error.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct KlArgs {
    /// Adverse histogram JSON.
    #[arg(long, conflicts_with = "depth", required_unless_present = "depth")]
    pub adv: Option<PathBuf>,
    /// Adverse depth map; its histogram uses the prior's spec and the gradient can be written.
    #[arg(long)]
    pub depth: Option<PathBuf>,
    /// Daytime prior histogram JSON.
    #[arg(long)]
    pub day: PathBuf,
    /// Write dL/dD for --depth, H×W.
    #[arg(long, requires = "depth")]
    pub grad_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ConsistencyArgs {
    /// Depth from the synthetic-stage teacher, H×W.
    #[arg(long)]
    pub syn: PathBuf,
    /// Depth from the daytime teacher, H×W.
    #[arg(long)]
    pub day: PathBuf,
    /// Confidence sharpness beta.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Weight floor eps added to the confidence.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// Confidence map output.
    #[arg(long)]
    pub out: PathBuf,
    /// Weight map (confidence + eps) output.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
    /// 8-bit PGM visualization of the confidence.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// alpha1 L_d + alpha2 L_cv + alpha3 L_T; defaults 1, 1, 1.
    Syn,
    /// alpha1 L_cd + alpha2 L_dis + alpha3 L_cv + alpha4 L_T; defaults 1, 0.01, 1, 1.
    Real,
}

#[derive(Debug, Args, Serialize)]
pub struct LossesArgs {
    /// Training stage.
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Weights JSON {"syn":{"alpha1",..},"real":{"alpha1",..},"lambda_ssim"}; missing sections keep defaults
    /// (syn 1, 1, 1; real 1, 0.01, 1, 1; lambda_ssim 0.85).
    #[arg(long)]
    pub weights: Option<PathBuf>,

    /// Depth term value (L_d in syn, L_cd in real).
    #[arg(long, conflicts_with = "student")]
    pub depth_term: Option<f64>,
    /// Student depth map: d_syn for L_d, d_real for L_cd.
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Teacher depth map: d_day for L_d, d_syn for L_cd.
    #[arg(long, requires = "student")]
    pub teacher: Option<PathBuf>,
    /// Per-pixel weights for L_cd, e.g. from `consistency --weights-out`.
    #[arg(long)]
    pub weight_map: Option<PathBuf>,

    /// Distribution term L_dis (real stage).
    #[arg(long, conflicts_with = "dis_depth")]
    pub dis_term: Option<f64>,
    /// Depth map for L_dis.
    #[arg(long, requires = "prior")]
    pub dis_depth: Option<PathBuf>,
    /// Daytime prior histogram JSON for L_dis.
    #[arg(long)]
    pub prior: Option<PathBuf>,

    /// Cost-volume term L_cv.
    #[arg(long, conflicts_with = "cv_student")]
    pub cv_term: Option<f64>,
    /// Teacher cost volume (sidecar at the same path with extension .json).
    #[arg(long, requires = "cv_student")]
    pub cv_teacher: Option<PathBuf>,
    /// Student cost volume.
    #[arg(long)]
    pub cv_student: Option<PathBuf>,

    /// Pose term L_T.
    #[arg(long, conflicts_with = "pose_student")]
    pub pose_term: Option<f64>,
    /// Teacher pose JSON {"theta":[3],"trans":[3]}.
    #[arg(long, requires = "pose_student")]
    pub pose_teacher: Option<PathBuf>,
    /// Student pose JSON.
    #[arg(long)]
    pub pose_student: Option<PathBuf>,
    /// Norm of the pose differences.
    #[arg(long, value_enum, default_value_t = PoseNorm::L2)]
    pub pose_norm: PoseNorm,

    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RangePreset {
    /// 0.1 to 80 m.
    Driving,
    /// 0.1 to 50 m.
    Robotcar,
}

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    /// Predicted depth map.
    #[arg(long, requires = "gt", conflicts_with = "manifest", required_unless_present = "manifest")]
    pub pred: Option<PathBuf>,
    /// Ground-truth depth map.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// CSV of `pred,gt` path pairs, one per line; relative paths resolve against the manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Evaluation range preset.
    #[arg(long, value_enum, default_value_t = RangePreset::Driving)]
    pub range: RangePreset,
    /// Override the lower bound of the range, meters.
    #[arg(long)]
    pub min_depth: Option<f64>,
    /// Override the upper bound of the range, meters.
    #[arg(long)]
    pub max_depth: Option<f64>,
    /// Rescale each prediction by median(gt) / median(pred).
    #[arg(long)]
    pub median_scaling: bool,
    /// Aggregate row pools pixels instead of averaging images.
    #[arg(long)]
    pub pooled: bool,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PlaneArg {
    Fronto,
    Sloped,
}

#[derive(Debug, Args, Serialize)]
pub struct SceneArgs {
    /// Full scene JSON; the flags below override its fields.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Plane type [default: fronto].
    #[arg(long, value_enum)]
    pub plane: Option<PlaneArg>,
    /// Plane depth at the principal point, meters [default: 41.75].
    #[arg(long)]
    pub depth: Option<f64>,
    /// Inverse-depth slope per pixel along u and v, for sloped planes.
    #[arg(long, num_args = 2, value_names = ["SU", "SV"], allow_hyphen_values = true)]
    pub slope: Option<Vec<f64>>,
    /// Camera translation, meters [default: 1 0 0].
    #[arg(long, num_args = 3, value_names = ["TX", "TY", "TZ"], allow_hyphen_values = true)]
    pub trans: Option<Vec<f64>>,
    /// Camera rotation, axis-angle radians [default: 0 0 0].
    #[arg(long, num_args = 3, value_names = ["RX", "RY", "RZ"], allow_hyphen_values = true)]
    pub theta: Option<Vec<f64>>,
}

impl SceneArgs {
    fn resolve(&self) -> Result<SceneSpec, CliError> {
        let mut spec = match &self.scene {
            Some(p) => read_json::<SceneSpec>(p)?,
            None => SceneSpec::default(),
        };
        if let Some(p) = self.plane {
            spec.kind = match p {
                PlaneArg::Fronto => PlaneKind::FrontoParallel,
                PlaneArg::Sloped => PlaneKind::SlopedPlane,
            };
        }
        if let Some(d) = self.depth {
            spec.depth = d;
        }
        if let Some(s) = &self.slope {
            spec.inv_depth_slope = [s[0], s[1]];
        }
        let theta = self.theta.as_ref().map_or(spec.motion.theta, |t| [t[0], t[1], t[2]]);
        let trans = self.trans.as_ref().map_or(spec.motion.trans, |t| [t[0], t[1], t[2]]);
        spec.motion = Pose::new(theta, trans)?;
        Ok(spec)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct OracleGenArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SelfcheckArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub candidates: CandidateArgs,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

/// Camera document: intrinsics plus the target-to-source pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDoc {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub theta: [f64; 3],
    #[serde(default)]
    pub trans: [f64; 3],
}

impl CameraDoc {
    pub fn resolve(&self) -> Result<(Intrinsics, Pose), GeometryError> {
        Ok((Intrinsics::new(self.fx, self.fy, self.cx, self.cy)?, Pose::new(self.theta, self.trans)?))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseDoc {
    theta: [f64; 3],
    trans: [f64; 3],
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RDK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("RDK_THREADS must be a non-negative integer, got {raw:?}")))?;
    // A pool that already exists (e.g. in tests) is fine to keep.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn announce<T: Serialize>(command: &str, config: &T) {
    let json = serde_json::to_string(config).unwrap_or_else(|_| "{}".into());
    eprintln!("rdk {command}: {json}");
}

pub fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Warp(a) => cmd_warp(a),
        Command::Costvol(a) => cmd_costvol(a),
        Command::Hist(a) => cmd_hist(a),
        Command::Klloss(a) => cmd_klloss(a),
        Command::Consistency(a) => cmd_consistency(a),
        Command::Losses(a) => cmd_losses(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Oracle {
            command: OracleCommand::Gen(a),
        } => cmd_oracle_gen(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    }
}

fn load(path: &Path) -> Result<Grid, CliError> {
    read_tensor(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn save(path: &Path, grid: &Grid) -> Result<(), CliError> {
    write_tensor(grid, path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn save_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    atomic_write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Writes to `out` atomically, or to standard output.
fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => save_bytes(p, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| CliError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })
        }
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn cmd_warp(a: &WarpArgs) -> Result<(), CliError> {
    let (k, pose) = read_json::<CameraDoc>(&a.camera)?.resolve()?;
    announce("warp", &serde_json::json!({ "args": a, "intrinsics": k, "pose": pose }));
    let source = load(&a.source)?;
    let depth_map;
    let depth = match (&a.depth, a.const_depth) {
        (Some(p), _) => {
            depth_map = load(p)?;
            DepthSource::Map(&depth_map)
        }
        (None, Some(z)) => DepthSource::Constant(z),
        (None, None) => return Err(CliError::Usage("one of --depth or --const-depth is required".into())),
    };
    let out = warp(&source, &pose, depth, &k)?;
    save(&a.out, &out.image)?;
    if let Some(p) = &a.mask_out {
        save(p, &out.mask)?;
    }
    Ok(())
}

fn cmd_costvol(a: &CostvolArgs) -> Result<(), CliError> {
    let (k, pose) = read_json::<CameraDoc>(&a.camera)?.resolve()?;
    let candidates = a.candidates.resolve()?;
    announce(
        "costvol",
        &serde_json::json!({ "args": a, "intrinsics": k, "pose": pose, "candidates": candidates }),
    );
    let feat_t = load(&a.feat_t)?;
    let feat_prev = load(&a.feat_prev)?;
    let cv = build_cost_volume(&feat_t, &feat_prev, &pose, &candidates, &k, a.mode)?;
    let sidecar = a.sidecar.clone().unwrap_or_else(|| sidecar_path(&a.out));
    cv.save(&a.out, &sidecar)?;
    if let Some(p) = &a.best_depth {
        save(p, &best_depth(&cv)?)?;
    }
    Ok(())
}

fn cmd_hist(a: &HistArgs) -> Result<(), CliError> {
    let spec = a.spec.resolve()?;
    announce("hist", &serde_json::json!({ "args": a, "spec": spec }));
    let maps = a.depth.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let hist = aggregate_reference(&maps, &spec)?;
    if let Some(p) = &a.tensor_out {
        save(p, &hist.to_grid())?;
    }
    if a.plot {
        eprint!("{}", ascii_plot(&hist, 60));
    }
    emit(a.out.as_deref(), &to_json(&hist))
}

#[derive(Serialize)]
struct KlReport {
    kl: f64,
    spec: HistogramSpec,
    grad_normalized: Vec<f64>,
}

fn cmd_klloss(a: &KlArgs) -> Result<(), CliError> {
    let day: Histogram = read_json(&a.day)?;
    announce("klloss", &serde_json::json!({ "args": a, "spec": day.spec }));
    let adv = match (&a.adv, &a.depth) {
        (Some(p), _) => read_json::<Histogram>(p)?,
        (None, Some(p)) => {
            let depth = load(p)?;
            if let Some(g) = &a.grad_out {
                let out = kl_loss_depth_grad(&depth, &day.spec, &day)?;
                save(g, &out.grad)?;
            }
            crate::dist_prior::soft_histogram(&depth, &day.spec)?
        }
        (None, None) => return Err(CliError::Usage("one of --adv or --depth is required".into())),
    };
    let kl = kl_loss(&adv, &day)?;
    emit(
        None,
        &to_json(&KlReport {
            kl: kl.value,
            spec: adv.spec,
            grad_normalized: kl.grad_normalized,
        }),
    )
}

fn cmd_consistency(a: &ConsistencyArgs) -> Result<(), CliError> {
    announce("consistency", a);
    let syn = load(&a.syn)?;
    let day = load(&a.day)?;
    let map = consistency_map(&syn, &day, a.beta, a.eps)?;
    save(&a.out, &map.confidence)?;
    if let Some(p) = &a.weights_out {
        save(p, &map.weights)?;
    }
    if let Some(p) = &a.pgm {
        save_bytes(p, &to_pgm(&map.confidence)?)?;
    }
    Ok(())
}

fn required(value: Option<f64>, name: &str) -> Result<f64, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing {name}")))
}

fn cmd_losses(a: &LossesArgs) -> Result<(), CliError> {
    let weights = match &a.weights {
        Some(p) => read_json::<LossWeights>(p)?,
        None => LossWeights::default(),
    };
    announce("losses", &serde_json::json!({ "args": a, "weights": weights }));

    let depth_term = match (&a.student, &a.teacher) {
        (Some(s), Some(t)) => {
            let (student, teacher) = (load(s)?, load(t)?);
            Some(match a.stage {
                Stage::Syn => loss_distill(&teacher, &student)?.value,
                Stage::Real => {
                    let w = match &a.weight_map {
                        Some(p) => load(p)?,
                        None => Grid::filled(student.shape().to_vec(), 1.0)?,
                    };
                    loss_consistent_depth(&student, &teacher, &w)?.value
                }
            })
        }
        (Some(_), None) => return Err(CliError::Usage("--student needs --teacher".into())),
        _ => a.depth_term,
    };
    let cv_term = match (&a.cv_teacher, &a.cv_student) {
        (Some(t), Some(s)) => {
            let teacher = CostVolume::load(t, &sidecar_path(t))?;
            let student = CostVolume::load(s, &sidecar_path(s))?;
            Some(loss_cv(&teacher, &student)?.value)
        }
        _ => a.cv_term,
    };
    let pose_term = match (&a.pose_teacher, &a.pose_student) {
        (Some(t), Some(s)) => {
            let (t, s) = (read_json::<PoseDoc>(t)?, read_json::<PoseDoc>(s)?);
            Some(loss_pose(s.theta, s.trans, t.theta, t.trans, a.pose_norm).total)
        }
        _ => a.pose_term,
    };

    let report = match a.stage {
        Stage::Syn => {
            if a.dis_term.is_some() || a.dis_depth.is_some() {
                return Err(CliError::Usage("the syn stage has no distribution term".into()));
            }
            let terms = SynTerms {
                depth: required(depth_term, "--depth-term or --student/--teacher")?,
                cost_volume: required(cv_term, "--cv-term or --cv-teacher/--cv-student")?,
                pose: required(pose_term, "--pose-term or --pose-teacher/--pose-student")?,
            };
            assemble_syn(&terms, &weights.syn)?
        }
        Stage::Real => {
            let dis_term = match (&a.dis_depth, &a.prior) {
                (Some(d), Some(p)) => {
                    let prior: Histogram = read_json(p)?;
                    let depth = load(d)?;
                    let adv = crate::dist_prior::soft_histogram(&depth, &prior.spec)?;
                    Some(kl_loss(&adv, &prior)?.value)
                }
                _ => a.dis_term,
            };
            let terms = RealTerms {
                consistent_depth: required(depth_term, "--depth-term or --student/--teacher")?,
                distribution: required(dis_term, "--dis-term or --dis-depth/--prior")?,
                cost_volume: required(cv_term, "--cv-term or --cv-teacher/--cv-student")?,
                pose: required(pose_term, "--pose-term or --pose-teacher/--pose-student")?,
            };
            assemble_real(&terms, &weights.real)?
        }
    };
    emit(a.out.as_deref(), &to_json(&report))
}

fn manifest_pairs(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let mut pairs = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if record.len() != 2 {
            return Err(CliError::Manifest {
                path: path.to_path_buf(),
                message: format!("record {} has {} fields, expected pred,gt", line + 1, record.len()),
            });
        }
        if line == 0 && &record[0] == "pred" && &record[1] == "gt" {
            continue;
        }
        pairs.push((base.join(&record[0]), base.join(&record[1])));
    }
    if pairs.is_empty() {
        return Err(CliError::Manifest {
            path: path.to_path_buf(),
            message: "no pairs".into(),
        });
    }
    Ok(pairs)
}

fn cmd_metrics(a: &MetricsArgs) -> Result<(), CliError> {
    let preset = match a.range {
        RangePreset::Driving => EvalRange::DRIVING,
        RangePreset::Robotcar => EvalRange::ROBOTCAR,
    };
    let range = EvalRange::new(a.min_depth.unwrap_or(preset.lo), a.max_depth.unwrap_or(preset.hi))?;
    let opts = EvalOptions {
        median_scaling: a.median_scaling,
    };
    announce("metrics", &serde_json::json!({ "args": a, "range": range }));
    let pairs = match (&a.manifest, &a.pred, &a.gt) {
        (Some(m), _, _) => manifest_pairs(m)?,
        (None, Some(p), Some(g)) => vec![(p.clone(), g.clone())],
        _ => return Err(CliError::Usage("give --pred and --gt, or --manifest".into())),
    };
    let grids = pairs
        .iter()
        .map(|(p, g)| Ok((load(p)?, load(g)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let rows = grids
        .iter()
        .map(|(p, g)| evaluate_with(p, g, &range, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    let aggregate = if a.pooled {
        evaluate_pooled(grids.iter().map(|(p, g)| (p, g)), &range, &opts)?
    } else {
        mean_rows(&rows)?
    };

    let mut writer = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Usage(e.to_string());
    writer.write_record(["file", "abs_rel", "sq_rel", "rmse", "delta1", "n_valid"]).map_err(io)?;
    let mut record = |name: &str, r: &MetricRow| {
        writer.write_record([
            name.to_string(),
            format!("{}", r.abs_rel),
            format!("{}", r.sq_rel),
            format!("{}", r.rmse),
            format!("{}", r.delta1),
            r.n_valid.to_string(),
        ])
    };
    for ((p, _), r) in pairs.iter().zip(&rows) {
        record(&p.display().to_string(), r).map_err(io)?;
    }
    record(if a.pooled { "pooled" } else { "mean" }, &aggregate).map_err(io)?;
    let bytes = writer.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    emit(a.out.as_deref(), &String::from_utf8_lossy(&bytes))
}

#[derive(Serialize)]
struct OracleManifest {
    scene: SceneSpec,
    pose: Pose,
    camera: CameraDoc,
    feat_t: String,
    feat_prev: String,
    depth_gt: String,
    depth_prev: String,
}

fn cmd_oracle_gen(a: &OracleGenArgs) -> Result<(), CliError> {
    let spec = a.scene.resolve()?;
    announce("oracle gen", &serde_json::json!({ "out_dir": a.out_dir, "scene": spec }));
    let scene = render(&spec)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|source| CliError::Io {
        path: a.out_dir.clone(),
        source,
    })?;
    let files = [
        ("feat_t.rdt", &scene.feat_t),
        ("feat_prev.rdt", &scene.feat_prev),
        ("depth_gt.rdt", &scene.depth_gt),
        ("depth_prev.rdt", &scene.depth_prev),
    ];
    for (name, grid) in files {
        save(&a.out_dir.join(name), grid)?;
    }
    let k = spec.camera;
    let manifest = OracleManifest {
        camera: CameraDoc {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            theta: scene.pose.theta,
            trans: scene.pose.trans,
        },
        pose: scene.pose,
        scene: spec,
        feat_t: files[0].0.into(),
        feat_prev: files[1].0.into(),
        depth_gt: files[2].0.into(),
        depth_prev: files[3].0.into(),
    };
    save_bytes(&a.out_dir.join("camera.json"), to_json(&manifest.camera).as_bytes())?;
    save_bytes(&a.out_dir.join("manifest.json"), to_json(&manifest).as_bytes())
}

fn cmd_selfcheck(a: &SelfcheckArgs) -> Result<(), CliError> {
    let spec = a.scene.resolve()?;
    let candidates = a.candidates.resolve()?;
    announce("selfcheck", &serde_json::json!({ "scene": spec, "candidates": candidates }));
    let report = selfcheck(&spec, &candidates);
    let text = if a.json {
        to_json(&report)
    } else {
        let mut s = String::new();
        let _ = writeln!(s, "{report}");
        s
    };
    emit(None, &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::SelfCheckFailed(report.failures()))
    }
}
