//! Subcommand implementations. Each returns the process exit code.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use log::info;
use nalgebra::{Vector2, Vector3};
use uncpnp::bench::{
    aggregate, rotation_error, run_benchmark, translation_error, write_aggregate_csv, write_trials_csv, BenchConfig,
    NoiseMode,
};
use uncpnp::robust::{run_pipeline_with, solve, DEFAULT_TAU2};
use uncpnp::uncertainty::{
    triangulate_line_with_covariance, triangulate_point_with_covariance, LineView, PointView, SegmentView,
};
use uncpnp::{Error, PipelineConfig, RansacConfig, RefineConfig, RefineRegime, SolverChoice};

use crate::error::{CliError, CliResult};
use crate::files::{
    mat2, read_json, rows3, to_json, write_output, InlierMask, Intrinsics, LandmarkFile, PointLandmark, PoseError,
    PoseRecord, ProblemFile, ResultFile, SegmentEstimate, SegmentLandmark, SolveEcho, Timings, TrackFile,
    TrackStatus,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_FALLBACK: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RefineMode {
    None,
    Standard,
    /// Iteratively refreshed covariances.
    Uncertain,
    /// Covariances differentiated with the pose.
    Full,
}

impl RefineMode {
    fn config(self) -> Option<RefineConfig> {
        let regime = match self {
            RefineMode::None => return None,
            RefineMode::Standard => RefineRegime::Standard,
            RefineMode::Uncertain => RefineRegime::IterativeUncertain,
            RefineMode::Full => RefineRegime::FullUncertain,
        };
        Some(RefineConfig::with_regime(regime))
    }

    fn name(self) -> &'static str {
        match self {
            RefineMode::None => "none",
            RefineMode::Standard => "standard",
            RefineMode::Uncertain => "uncertain",
            RefineMode::Full => "full",
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Problem file (JSON).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "epnpu",
          value_parser = ["epnpu", "epnplu", "dlsu", "dlslu", "epnp", "epnpl", "dls", "dlsl", "p3p"])]
    pub method: String,
    /// Weight with per-feature depths from a pose hypothesis (the file's
    /// `pose_hypothesis`, else the RANSAC pose).
    #[arg(long)]
    pub starred: bool,
    #[arg(long, value_enum, default_value_t = RefineMode::Uncertain)]
    pub refine: RefineMode,
    /// Chi-square gate for RANSAC inliers.
    #[arg(long, default_value_t = DEFAULT_TAU2)]
    pub tau2: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Result file; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn cmd_solve(args: &SolveArgs) -> CliResult<i32> {
    let problem: ProblemFile = read_json(&args.input)?;
    let corr = problem.correspondences()?;
    let hypothesis = problem.hypothesis()?;
    let name = if args.starred { format!("{}*", args.method) } else { args.method.clone() };
    let choice = SolverChoice::parse(&name).map_err(|e| CliError::Input(format!("--method: {e}")))?;
    if !(args.tau2 > 0.0 && args.tau2.is_finite()) {
        return Err(CliError::Input("--tau2: must be positive".into()));
    }
    let config = PipelineConfig {
        ransac: RansacConfig { tau2: args.tau2, rng_seed: args.seed, ..RansacConfig::default() },
        refine: args.refine.config(),
        d_bar: problem.d_bar,
        ..PipelineConfig::default()
    };
    let res = run_pipeline_with(&corr, choice.lines, &config, |inliers, ransac_pose, d_bar| {
        solve(&choice, inliers, Some(hypothesis.as_ref().unwrap_or(ransac_pose)), Some(d_bar))
    })?;

    let np = corr.points.len();
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let ground_truth_error = match &problem.ground_truth {
        Some(gt) => {
            let gt = gt.to_pose("ground_truth")?;
            Some(PoseError {
                e_rot_deg: rotation_error(&gt.rotation, &res.pose.rotation),
                e_trans_pct: translation_error(&gt.translation, &res.pose.translation),
            })
        }
        None => None,
    };
    let out = ResultFile {
        method: choice.name(),
        config: SolveEcho {
            refine: args.refine.name().into(),
            tau2: args.tau2,
            seed: args.seed,
            starred: args.starred,
            hypothesis: match (args.starred, hypothesis.is_some()) {
                (false, _) => "none",
                (true, true) => "file",
                (true, false) => "ransac",
            }
            .into(),
            d_bar: problem.d_bar,
        },
        pose: PoseRecord::from(&res.pose),
        ransac_pose: PoseRecord::from(&res.ransac_pose),
        inliers: InlierMask { points: res.inliers[..np].to_vec(), lines: res.inliers[np..].to_vec() },
        timings: Timings {
            ransac_ms: ms(res.timings.ransac),
            solver_ms: ms(res.timings.solver),
            refine_ms: ms(res.timings.refine),
        },
        solver_failed_fallback_to_ransac: res.solver_failed_fallback_to_ransac,
        ground_truth_error,
    };
    write_output(args.output.as_deref(), &to_json(&out))?;
    if res.solver_failed_fallback_to_ransac {
        eprintln!("warning: solver failed; reporting the RANSAC pose");
        return Ok(EXIT_FALLBACK);
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "3d", value_parser = ["2d", "3d", "lines"])]
    pub mode: String,
    #[arg(long, default_value_t = 10)]
    pub n_min: usize,
    #[arg(long, default_value_t = 110)]
    pub n_max: usize,
    #[arg(long, default_value_t = 10)]
    pub n_step: usize,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated method names, e.g. `epnp,epnpu,dlsu*`.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Receives `trials.csv` and `aggregate.csv`.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Record wall time per trial (tables are then no longer reproducible).
    #[arg(long)]
    pub timing: bool,
    /// Worker threads; defaults to `UNCPNP_THREADS` or all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

fn default_methods(mode: NoiseMode) -> Vec<&'static str> {
    let mut m = vec!["epnp", "epnpu", "epnpu*", "dls", "dlsu", "dlsu*"];
    if mode == NoiseMode::Lines {
        m.extend(["epnpl", "epnplu", "epnplu*", "dlsl", "dlslu", "dlslu*"]);
    }
    m
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult<i32> {
    let mode = NoiseMode::parse(&args.mode).map_err(|e| CliError::Input(format!("--mode: {e}")))?;
    if args.n_min < 4 || args.n_max < args.n_min || args.n_step == 0 {
        return Err(CliError::Input(
            "invalid sweep: need 4 <= --n-min <= --n-max and --n-step >= 1".into(),
        ));
    }
    if args.trials == 0 {
        return Err(CliError::Input("--trials: must be at least 1".into()));
    }
    if args.threads == Some(0) {
        return Err(CliError::Input("--threads: must be at least 1".into()));
    }
    let names: Vec<String> = match &args.methods {
        Some(m) => m.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => default_methods(mode).into_iter().map(String::from).collect(),
    };
    if names.is_empty() {
        return Err(CliError::Input("--methods: at least one method is required".into()));
    }
    let methods = names
        .iter()
        .map(|n| SolverChoice::parse(n).map_err(|e| CliError::Input(format!("--methods: {e}"))))
        .collect::<CliResult<Vec<_>>>()?;

    let mut cfg = BenchConfig::new(methods, mode);
    cfg.n_values = (args.n_min..=args.n_max).step_by(args.n_step).collect();
    cfg.trials = args.trials;
    cfg.seed = args.seed;
    cfg.threads = args.threads;
    cfg.timing = args.timing;
    let rows = run_benchmark(&cfg)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let create = |name: &str| -> CliResult<std::fs::File> {
        let path = args.out_dir.join(name);
        std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))
    };
    write_trials_csv(create("trials.csv")?, &rows)?;
    write_aggregate_csv(create("aggregate.csv")?, &aggregate(&rows))?;
    info!("wrote {} rows to {}", rows.len(), args.out_dir.display());
    Ok(EXIT_OK)
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    /// Track file (JSON).
    #[arg(long)]
    pub tracks: PathBuf,
    /// Landmark file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn image_point(k: &Option<Intrinsics>, u: &[f64; 2], cov: &[[f64; 2]; 2]) -> (Vector2<f64>, nalgebra::Matrix2<f64>) {
    let (u, c) = (Vector2::from(*u), mat2(cov));
    match k {
        Some(k) => (k.point(&u), k.covariance(&c)),
        None => (u, c),
    }
}

fn status_of(e: &Error) -> TrackStatus {
    match e {
        Error::DegenerateBaseline => TrackStatus::DegenerateBaseline,
        _ => TrackStatus::Failed,
    }
}

pub fn propagate(tracks: &TrackFile) -> CliResult<LandmarkFile> {
    let k = tracks.intrinsics;
    if let Some(k) = &k {
        k.validate()?;
    }
    let mut out = LandmarkFile::default();
    for (i, track) in tracks.points.iter().enumerate() {
        let views = track
            .views
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let (u, cov_u) = image_point(&k, &v.u, &v.cov_u);
                Ok(PointView { pose: v.pose.to_pose(&format!("points[{i}].views[{j}].pose"))?, u, cov_u })
            })
            .collect::<CliResult<Vec<_>>>()?;
        out.points.push(match triangulate_point_with_covariance(&views) {
            Ok(t) => PointLandmark { status: TrackStatus::Ok, message: None, x: Some(t.x.into()), cov: Some(rows3(&t.cov)) },
            Err(e) => PointLandmark { status: status_of(&e), message: Some(e.to_string()), x: None, cov: None },
        });
    }
    for (i, track) in tracks.segments.iter().enumerate() {
        let r = &track.reference;
        let (a, cov_a) = image_point(&k, &r.a, &r.cov_a);
        let (b, cov_b) = image_point(&k, &r.b, &r.cov_b);
        let reference = SegmentView { pose: r.pose.to_pose(&format!("segments[{i}].reference.pose"))?, a, b, cov_a, cov_b };
        let views = track
            .views
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let field = format!("segments[{i}].views[{j}]");
                let raw = Vector3::from(v.l);
                let (l, sigma_l2) = match &k {
                    Some(k) => k.line(&raw, v.sigma_l2),
                    None => uncpnp::residuals::normalize_line(&raw).map(|l| (l, v.sigma_l2)),
                }
                .map_err(|e| CliError::Input(format!("{field}.l: {e}")))?;
                Ok(LineView { pose: v.pose.to_pose(&format!("{field}.pose"))?, l, sigma_l2 })
            })
            .collect::<CliResult<Vec<_>>>()?;
        out.segments.push(match triangulate_line_with_covariance(&reference, &views) {
            Ok(t) => SegmentLandmark {
                status: TrackStatus::Ok,
                message: None,
                segment: Some(SegmentEstimate {
                    p: t.p.into(),
                    q: t.q.into(),
                    cov_p: rows3(&t.cov_p),
                    cov_q: rows3(&t.cov_q),
                    cross_cov: rows3(&t.cross_cov),
                }),
            },
            Err(e) => SegmentLandmark { status: status_of(&e), message: Some(e.to_string()), segment: None },
        });
    }
    Ok(out)
}

pub fn cmd_propagate(args: &PropagateArgs) -> CliResult<i32> {
    let tracks: TrackFile = read_json(&args.tracks)?;
    let out = propagate(&tracks)?;
    let flagged = out
        .points
        .iter()
        .map(|p| p.status)
        .chain(out.segments.iter().map(|s| s.status))
        .filter(|s| *s != TrackStatus::Ok)
        .count();
    if flagged > 0 {
        eprintln!("warning: {flagged} track(s) flagged");
    }
    write_output(args.out.as_deref(), &to_json(&out))?;
    Ok(EXIT_OK)
}

