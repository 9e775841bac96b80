//! Synthetic scenes with heteroscedastic noise, pose error metrics and the
//! Monte Carlo driver that writes per-trial and aggregate CSV tables.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Matrix2, Matrix3, Quaternion, Rotation2, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{project, Pose};
use crate::problem::Correspondences;
use crate::residuals::{normalize_line, LineObservation, PointObservation};
use crate::robust::{solve, SolverChoice};

/// Scene geometry and camera used to synthesize observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub n_points: usize,
    pub n_lines: usize,
    pub box_min: Vector3<f64>,
    pub box_max: Vector3<f64>,
    pub focal: f64,
    pub width: f64,
    pub height: f64,
    /// Standard deviation of the endpoint slide along a line, as a fraction
    /// of its length.
    pub endpoint_shift_frac: f64,
    /// Camera-frame position of the world origin.
    pub translation: Vector3<f64>,
}

impl SceneSpec {
    pub fn new(n_points: usize, n_lines: usize) -> Self {
        Self {
            n_points,
            n_lines,
            box_min: Vector3::new(-2.0, -2.0, 4.0),
            box_max: Vector3::new(2.0, 2.0, 8.0),
            focal: 800.0,
            width: 640.0,
            height: 480.0,
            endpoint_shift_frac: 0.10,
            translation: Vector3::new(0.0, 0.0, 6.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.box_min.z > 0.0) || (0..3).any(|i| !(self.box_max[i] > self.box_min[i])) {
            return Err(Error::InvalidInput("scene box must be non-empty and in front of the camera".into()));
        }
        if !(self.focal > 0.0) || self.endpoint_shift_frac < 0.0 {
            return Err(Error::InvalidInput("focal length must be positive".into()));
        }
        Ok(())
    }
}

/// Which noise sources are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseMode {
    /// Image noise only.
    TwoD,
    /// Image and structure noise.
    ThreeD,
    /// Image and structure noise with as many lines as points.
    Lines,
}

impl NoiseMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseMode::TwoD => "2d",
            NoiseMode::ThreeD => "3d",
            NoiseMode::Lines => "lines",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(NoiseMode::TwoD),
            "3d" => Ok(NoiseMode::ThreeD),
            "lines" => Ok(NoiseMode::Lines),
            _ => Err(Error::InvalidInput(format!("unknown noise mode '{s}'"))),
        }
    }

    pub fn has_structure_noise(&self) -> bool {
        !matches!(self, NoiseMode::TwoD)
    }
}

/// Features are split into contiguous subsets whose noise levels step
/// linearly through the ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub n_subsets: usize,
    pub sigma3d_range: (f64, f64),
    /// Pixels.
    pub sigma2d_range: (f64, f64),
    pub structure_noise: bool,
    /// Draw noise; when false observations are exact but keep their
    /// covariances.
    pub realize: bool,
}

impl NoiseSchedule {
    pub fn new(mode: NoiseMode) -> Self {
        Self {
            n_subsets: 10,
            sigma3d_range: (0.05, 0.5),
            sigma2d_range: (1.0, 10.0),
            structure_noise: mode.has_structure_noise(),
            realize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(a, b): (f64, f64)| a > 0.0 && b >= a;
        if self.n_subsets == 0 || !ok(self.sigma3d_range) || !ok(self.sigma2d_range) {
            return Err(Error::InvalidInput("noise ranges must be positive and increasing".into()));
        }
        Ok(())
    }

    /// Subset of feature `i` out of `n`.
    pub fn subset(&self, i: usize, n: usize) -> usize {
        (i * self.n_subsets / n.max(1)).min(self.n_subsets - 1)
    }

    fn rung(&self, (lo, hi): (f64, f64), subset: usize) -> f64 {
        if self.n_subsets == 1 {
            return lo;
        }
        lo + (hi - lo) * subset as f64 / (self.n_subsets - 1) as f64
    }

    pub fn sigma3d(&self, subset: usize) -> f64 {
        self.rung(self.sigma3d_range, subset)
    }

    pub fn sigma2d(&self, subset: usize) -> f64 {
        self.rung(self.sigma2d_range, subset)
    }
}

/// Uniform random rotation from a normalized Gaussian 4-vector.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if q.norm() > 1e-6 {
            return UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        }
    }
}

fn gaussian3<R: Rng>(rng: &mut R) -> Vector3<f64> {
    Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Anisotropic 3D noise with a random orientation and principal deviations
/// `{σ, σ₁, σ₂}`, `σ₁, σ₂ ~ U(0, σ]`. Returns the covariance and its square
/// root.
fn anisotropic3<R: Rng>(rng: &mut R, sigma: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let rot = random_rotation(rng);
    let s1 = sigma * (1.0 - rng.random::<f64>());
    let s2 = sigma * (1.0 - rng.random::<f64>());
    let root = rot * Matrix3::from_diagonal(&Vector3::new(sigma, s1, s2));
    (root * root.transpose(), root)
}

fn anisotropic2<R: Rng>(rng: &mut R, sigma: f64) -> (Matrix2<f64>, Matrix2<f64>) {
    let rot = Rotation2::new(rng.random_range(0.0..std::f64::consts::TAU)).into_inner();
    let s1 = sigma * (1.0 - rng.random::<f64>());
    let root = rot * Matrix2::from_diagonal(&Vector2::new(sigma, s1));
    (root * root.transpose(), root)
}

fn sample_box<R: Rng>(rng: &mut R, spec: &SceneSpec) -> Vector3<f64> {
    Vector3::from_fn(|i, _| rng.random_range(spec.box_min[i]..spec.box_max[i]))
}

/// A generated problem with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub pose: Pose<f64>,
    pub corr: Correspondences<f64>,
    /// Mean true depth of all features.
    pub mean_depth: f64,
}

/// Draws one scene. Attached covariances are the sampling covariances in
/// normalized image coordinates.
pub fn generate_trial<R: Rng>(spec: &SceneSpec, schedule: &NoiseSchedule, rng: &mut R) -> Result<Trial> {
    spec.validate()?;
    schedule.validate()?;
    let rotation = random_rotation(rng);
    let pose = Pose::new(rotation, spec.translation);
    let to_world = |xc: &Vector3<f64>| rotation.transpose() * (xc - spec.translation);
    let f2 = spec.focal * spec.focal;
    let gain = if schedule.realize { 1.0 } else { 0.0 };
    let mut depth_sum = 0.0;

    let mut points = Vec::with_capacity(spec.n_points);
    for i in 0..spec.n_points {
        let k = schedule.subset(i, spec.n_points);
        let xc = sample_box(rng, spec);
        depth_sum += xc.z;
        let (cov_px, root_px) = anisotropic2(rng, schedule.sigma2d(k));
        let u = project(&xc)? + root_px * Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * (gain / spec.focal);
        let (cov_x, noise_x) = if schedule.structure_noise {
            let (c, root) = anisotropic3(rng, schedule.sigma3d(k));
            (c, root * gaussian3(rng) * gain)
        } else {
            (Matrix3::zeros(), Vector3::zeros())
        };
        points.push(PointObservation::new(to_world(&xc) + rotation.transpose() * noise_x, rotation.transpose() * cov_x * rotation, u, cov_px / f2));
    }

    let mut lines = Vec::with_capacity(spec.n_lines);
    for i in 0..spec.n_lines {
        let k = schedule.subset(i, spec.n_lines);
        let sigma2d = schedule.sigma2d(k);
        let (pc, qc) = loop {
            let p = sample_box(rng, spec);
            let q = sample_box(rng, spec);
            if (p - q).norm() > 0.1 {
                break (p, q);
            }
        };
        depth_sum += pc.z + qc.z;
        let mut noisy = [Vector2::zeros(); 2];
        for (n, x) in noisy.iter_mut().zip([pc, qc]) {
            let (_, root) = anisotropic2(rng, sigma2d);
            *n = project(&x)? + root * Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * (gain / spec.focal);
        }
        let l = normalize_line(&Vector3::new(noisy[0].x, noisy[0].y, 1.0).cross(&Vector3::new(noisy[1].x, noisy[1].y, 1.0)))?;
        let d = qc - pc;
        let shift = spec.endpoint_shift_frac;
        let p_slid = pc + d * (shift * rng.sample::<f64, _>(StandardNormal));
        let q_slid = qc + d * (shift * rng.sample::<f64, _>(StandardNormal));
        let mut ends = [(p_slid, Matrix3::zeros()), (q_slid, Matrix3::zeros())];
        if schedule.structure_noise {
            for (x, c) in ends.iter_mut() {
                let (cov, root) = anisotropic3(rng, schedule.sigma3d(k));
                *x += root * gaussian3(rng) * gain;
                *c = cov;
            }
        }
        lines.push(LineObservation {
            p: to_world(&ends[0].0),
            q: to_world(&ends[1].0),
            cov_p: rotation.transpose() * ends[0].1 * rotation,
            cov_q: rotation.transpose() * ends[1].1 * rotation,
            l,
            sigma_l2: sigma2d * sigma2d / f2,
        });
    }
    let n_feat = spec.n_points + 2 * spec.n_lines;
    Ok(Trial {
        pose,
        corr: Correspondences::new(points, lines),
        mean_depth: if n_feat > 0 { depth_sum / n_feat as f64 } else { 0.0 },
    })
}

/// Angle of `R_trueᵀ R` in degrees.
///
/// Evaluated as `atan2(sin θ, cos θ)`, which equals `|acos((tr − 1)/2)|` but
/// keeps full precision for small angles.
pub fn rotation_error(r_true: &Matrix3<f64>, r: &Matrix3<f64>) -> f64 {
    let d = r_true.transpose() * r;
    let c = (0.5 * (d.trace() - 1.0)).clamp(-1.0, 1.0);
    let s = 0.5 * Vector3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]).norm();
    s.min(1.0).atan2(c).abs().to_degrees()
}

/// `‖t_true − t‖ / ‖t_true‖` in percent.
pub fn translation_error(t_true: &Vector3<f64>, t: &Vector3<f64>) -> f64 {
    (t_true - t).norm() / t_true.norm() * 100.0
}

/// One row of the per-trial table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub method: String,
    pub n_points: usize,
    pub n_lines: usize,
    pub noise_mode: String,
    pub trial: usize,
    pub e_rot_deg: Option<f64>,
    pub e_trans_pct: Option<f64>,
    pub time_ms: f64,
    pub flags: String,
}

impl TrialResult {
    pub fn ok(&self) -> bool {
        self.e_rot_deg.is_some()
    }
}

/// Per-cell statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub method: String,
    pub n_points: usize,
    pub n_lines: usize,
    pub noise_mode: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_e_rot_deg: f64,
    pub median_e_rot_deg: f64,
    pub mean_e_trans_pct: f64,
    pub median_e_trans_pct: f64,
    pub mean_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub methods: Vec<SolverChoice>,
    pub n_values: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub mode: NoiseMode,
    pub schedule: NoiseSchedule,
    /// Worker threads; `None` uses `UNCPNP_THREADS` or all cores.
    pub threads: Option<usize>,
    /// Measure wall time; otherwise `time_ms` is zero so tables are
    /// reproducible byte for byte.
    pub timing: bool,
}

impl BenchConfig {
    pub fn new(methods: Vec<SolverChoice>, mode: NoiseMode) -> Self {
        Self {
            methods,
            n_values: (10..=110).step_by(10).collect(),
            trials: 50,
            seed: 0,
            mode,
            schedule: NoiseSchedule::new(mode),
            threads: None,
            timing: false,
        }
    }

    pub fn scene(&self, n: usize) -> SceneSpec {
        SceneSpec::new(n, if self.mode == NoiseMode::Lines { n } else { 0 })
    }
}

/// Thread count from `UNCPNP_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("UNCPNP_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// RNG stream of one trial; independent of scheduling.
pub fn trial_rng(seed: u64, cell: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((cell as u64) << 32) | trial as u64);
    rng
}

/// Runs one method on a trial. Starred methods take their hypothesis from
/// the matching unweighted solver.
pub fn run_method(choice: &SolverChoice, trial: &Trial) -> Result<Pose<f64>> {
    let hypothesis = if choice.starred {
        Some(solve(&choice.plain(), &trial.corr, None, None)?)
    } else {
        None
    };
    solve(choice, &trial.corr, hypothesis.as_ref(), Some(trial.mean_depth))
}

fn evaluate(choice: &SolverChoice, trial: &Trial, cfg: &BenchConfig, index: usize) -> TrialResult {
    let clock = Instant::now();
    let res = run_method(choice, trial);
    let time_ms = if cfg.timing { clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let (e_rot_deg, e_trans_pct, flags) = match res {
        Ok(p) => (
            Some(rotation_error(&trial.pose.rotation, &p.rotation)),
            Some(translation_error(&trial.pose.translation, &p.translation)),
            String::new(),
        ),
        Err(e) => (None, None, format!("failed: {e}")),
    };
    TrialResult {
        method: choice.name(),
        n_points: trial.corr.points.len(),
        n_lines: trial.corr.lines.len(),
        noise_mode: cfg.mode.as_str().into(),
        trial: index,
        e_rot_deg,
        e_trans_pct,
        time_ms,
        flags,
    }
}

/// Per-trial rows ordered by cell, trial and method. Every method sees the
/// same scene within a trial.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<TrialResult>> {
    if cfg.methods.is_empty() {
        return Err(Error::InvalidInput("no methods selected".into()));
    }
    if cfg.n_values.is_empty() || cfg.trials == 0 {
        return Err(Error::InvalidInput("empty sweep".into()));
    }
    cfg.schedule.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.n_values.len())
        .flat_map(|c| (0..cfg.trials).map(move |t| (c, t)))
        .collect();
    let work = || -> Result<Vec<Vec<TrialResult>>> {
        jobs.par_iter()
            .map(|&(cell, t)| {
                let mut rng = trial_rng(cfg.seed, cell, t);
                let trial = generate_trial(&cfg.scene(cfg.n_values[cell]), &cfg.schedule, &mut rng)?;
                Ok(cfg.methods.iter().map(|m| evaluate(m, &trial, cfg, t)).collect())
            })
            .collect()
    };
    let threads = cfg.threads.or_else(threads_from_env);
    let rows = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    Ok(rows.into_iter().flatten().collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean and median per (method, cell), in first-appearance order. Failed
/// trials are counted but excluded from the statistics.
pub fn aggregate(rows: &[TrialResult]) -> Vec<CellSummary> {
    let mut keys: Vec<(String, usize, usize, String)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.n_points, r.n_lines, r.noise_mode.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, n_points, n_lines, noise_mode)| {
            let cell: Vec<&TrialResult> = rows
                .iter()
                .filter(|r| r.method == method && r.n_points == n_points && r.n_lines == n_lines && r.noise_mode == noise_mode)
                .collect();
            let ok: Vec<&&TrialResult> = cell.iter().filter(|r| r.ok()).collect();
            let rot: Vec<f64> = ok.iter().filter_map(|r| r.e_rot_deg).collect();
            let trans: Vec<f64> = ok.iter().filter_map(|r| r.e_trans_pct).collect();
            let time: Vec<f64> = cell.iter().map(|r| r.time_ms).collect();
            CellSummary {
                method,
                n_points,
                n_lines,
                noise_mode,
                n_ok: ok.len(),
                n_failed: cell.len() - ok.len(),
                mean_e_rot_deg: mean(&rot),
                median_e_rot_deg: median(rot),
                mean_e_trans_pct: mean(&trans),
                median_e_trans_pct: median(trans),
                mean_time_ms: mean(&time),
            }
        })
        .collect()
}

fn write_csv<W: Write, S: Serialize>(out: W, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(())
}

pub fn write_trials_csv<W: Write>(out: W, rows: &[TrialResult]) -> Result<()> {
    write_csv(out, rows)
}

pub fn write_aggregate_csv<W: Write>(out: W, rows: &[CellSummary]) -> Result<()> {
    write_csv(out, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;

    #[test]
    fn metric_identities() {
        let r = random_rotation(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(rotation_error(&r, &r), 0.0);
        let axis = Vector3::new(0.3, -0.5, 0.8).normalize();
        let r10 = so3_exp(&(axis * 10f64.to_radians())) * r;
        assert!((rotation_error(&r, &r10) - 10.0).abs() < 1e-9);
        assert!((rotation_error(&r10, &r) - rotation_error(&r.transpose(), &r10.transpose())).abs() < 1e-12);
        let t = Vector3::new(0.1, -0.2, 6.0);
        assert!((translation_error(&t, &(t * 1.05)) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn subsets_follow_linear_schedule() {
        let s = NoiseSchedule::new(NoiseMode::ThreeD);
        assert_eq!(s.subset(0, 20), 0);
        assert_eq!(s.subset(19, 20), 9);
        assert_eq!(s.subset(10, 20), 5);
        assert!((s.sigma3d(0) - 0.05).abs() < 1e-15 && (s.sigma3d(9) - 0.5).abs() < 1e-15);
        assert!((s.sigma2d(4) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attached_covariances_follow_the_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = SceneSpec::new(20, 0);
        let schedule = NoiseSchedule::new(NoiseMode::ThreeD);
        let t = generate_trial(&spec, &schedule, &mut rng).unwrap();
        for (i, p) in t.corr.points.iter().enumerate() {
            let s = schedule.sigma3d(schedule.subset(i, 20));
            let eig = p.cov_x.symmetric_eigenvalues();
            assert!((eig.max() - s * s).abs() < 1e-12);
            assert!(eig.min() > 0.0);
            let s2 = schedule.sigma2d(schedule.subset(i, 20)) / 800.0;
            assert!((p.cov_u.symmetric_eigenvalues().max() - s2 * s2).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_scene_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut schedule = NoiseSchedule::new(NoiseMode::Lines);
        schedule.realize = false;
        schedule.sigma3d_range = (0.05, 0.5);
        let t = generate_trial(&SceneSpec::new(10, 10), &schedule, &mut rng).unwrap();
        for p in &t.corr.points {
            assert!((project(&t.pose.transform(&p.x)).unwrap() - p.u).norm() < 1e-12);
        }
        for l in &t.corr.lines {
            for x in [l.p, l.q] {
                let u = project(&t.pose.transform(&x)).unwrap();
                assert!((l.l.x * u.x + l.l.y * u.y + l.l.z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn benchmark_is_deterministic_across_thread_counts() {
        let methods = ["epnp", "epnpu", "dlsu*"].iter().map(|m| SolverChoice::parse(m).unwrap()).collect();
        let mut cfg = BenchConfig::new(methods, NoiseMode::ThreeD);
        cfg.n_values = vec![10, 20];
        cfg.trials = 3;
        cfg.seed = 5;
        cfg.threads = Some(1);
        let a = run_benchmark(&cfg).unwrap();
        cfg.threads = Some(4);
        let b = run_benchmark(&cfg).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_trials_csv(&mut ba, &a).unwrap();
        write_trials_csv(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(aggregate(&a).len(), 6);
    }
}
