//! Minimal three-point solver, RANSAC with covariance-weighted gating, and
//! the localization pipeline: RANSAC, pose solver on the inliers, inlier
//! re-filtering and motion-only refinement.

use std::time::{Duration, Instant};

use log::debug;
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dls::{solve_dlsu, DlsConfig};
use crate::epnp::{solve_epnpu, EpnpConfig};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::linalg::{information2, weighted_procrustes};
use crate::problem::{Correspondences, DepthSource, Weighting};
use crate::refine::{refine, RefineConfig};
use crate::residuals::{
    gold_line_covariance, gold_line_residual, gold_point_covariance, gold_point_residual,
    point_algebraic_residual, PointObservation, SceneDepth,
};
use crate::scalar::Real;

/// χ²₂ 95% quantile.
pub const DEFAULT_TAU2: f64 = 5.991;
/// Re-gating threshold applied before refinement (6²).
pub const REGATE_TAU2: f64 = 36.0;

/// Polynomial coefficients in ascending order.
fn poly_mul<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_sub<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    (0..a.len().max(b.len()))
        .map(|i| a.get(i).copied().unwrap_or(T::zero()) - b.get(i).copied().unwrap_or(T::zero()))
        .collect()
}

fn poly_eval<T: Real>(p: &[T], x: T) -> T {
    p.iter().rev().fold(T::zero(), |acc, &c| acc * x + c)
}

/// Real roots of a polynomial through its companion matrix, polished with a
/// few Newton steps.
pub fn real_roots<T: Real>(p: &[T]) -> Vec<T> {
    let scale = p.iter().fold(T::zero(), |m, c| m.max(c.abs()));
    if !(scale > T::zero()) {
        return Vec::new();
    }
    let mut deg = p.len() - 1;
    while deg > 0 && p[deg].abs() <= scale * T::lit(1e-14) {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = p[deg];
    let mut comp = DMatrix::zeros(deg, deg);
    for i in 0..deg {
        comp[(0, i)] = -p[deg - 1 - i] / lead;
        if i + 1 < deg {
            comp[(i + 1, i)] = T::one();
        }
    }
    let dp: Vec<T> = (1..=deg).map(|k| p[k] * T::from_usize_lossy(k)).collect();
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= T::lit(1e-4) * (T::one() + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..4 {
                let d = poly_eval(&dp, x);
                if d == T::zero() {
                    break;
                }
                let step = poly_eval(&p[..=deg], x) / d;
                if !step.is_finite() {
                    break;
                }
                x -= step;
            }
            x
        })
        .collect()
}

fn bearing<T: Real>(obs: &PointObservation<T>) -> Vector3<T> {
    Vector3::new(obs.u.x, obs.u.y, T::one()).normalize()
}

/// Newton steps on the three pairwise-distance equations in the depths.
fn polish_depths<T: Real>(f: &[Vector3<T>; 3], d2: [T; 3], mut s: Vector3<T>) -> Vector3<T> {
    let pairs = [(1, 2), (0, 2), (0, 1)];
    for _ in 0..5 {
        let mut res = Vector3::zeros();
        let mut jac = Matrix3::zeros();
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let diff = f[i] * s[i] - f[j] * s[j];
            res[k] = diff.norm_squared() - d2[k];
            jac[(k, i)] = T::lit(2.0) * diff.dot(&f[i]);
            jac[(k, j)] = -T::lit(2.0) * diff.dot(&f[j]);
        }
        let Some(step) = jac.lu().solve(&res) else {
            break;
        };
        let next = s - step;
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        s = next;
    }
    s
}

/// Poses consistent with three point correspondences (at most four).
pub fn p3p<T: Real>(obs: &[PointObservation<T>; 3]) -> Result<Vec<Pose<T>>> {
    let x = [obs[0].x, obs[1].x, obs[2].x];
    let f = [bearing(&obs[0]), bearing(&obs[1]), bearing(&obs[2])];
    let e1 = x[1] - x[0];
    let e2 = x[2] - x[0];
    if !(e1.cross(&e2).norm() > T::lit(1e-9) * e1.norm() * e2.norm()) {
        return Err(Error::DegenerateTriple);
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if f[i].cross(&f[j]).norm() < T::lit(1e-12) {
            return Err(Error::DegenerateTriple);
        }
    }
    let a2 = (x[1] - x[2]).norm_squared();
    let b2 = (x[0] - x[2]).norm_squared();
    let c2 = (x[0] - x[1]).norm_squared();
    let ca = f[1].dot(&f[2]);
    let cb = f[0].dot(&f[2]);
    let cg = f[0].dot(&f[1]);
    let two = T::lit(2.0);

    // With u = s₂/s₁ and v = s₃/s₁ both constraints are quadratics in u whose
    // coefficients are polynomials in v.
    let p0 = vec![b2 - c2, two * c2 * cb, -c2];
    let p1 = vec![-two * b2 * cg];
    let p2 = vec![b2];
    let q0 = vec![-a2, two * a2 * cb, b2 - a2];
    let q1 = vec![T::zero(), -two * b2 * ca];
    let q2 = vec![b2];
    let d20 = poly_sub(&poly_mul(&p2, &q0), &poly_mul(&p0, &q2));
    let d21 = poly_sub(&poly_mul(&p2, &q1), &poly_mul(&p1, &q2));
    let d10 = poly_sub(&poly_mul(&p1, &q0), &poly_mul(&p0, &q1));
    let quartic = poly_sub(&poly_mul(&d20, &d20), &poly_mul(&d21, &d10));

    let scale = x.iter().map(|p| (p - x[0]).norm()).fold(T::zero(), |m, v| m.max(v));
    // ~1.5e-8 in double precision
    let accept = T::default_epsilon().sqrt();
    let mut poses: Vec<Pose<T>> = Vec::new();
    for v in real_roots(&quartic) {
        if !(v > T::zero()) {
            continue;
        }
        let pv0 = poly_eval(&p0, v);
        let qv0 = poly_eval(&q0, v);
        let pv1 = p1[0];
        let qv1 = poly_eval(&q1, v);
        let mut us = Vec::new();
        if (pv1 - qv1).abs() > T::lit(1e-10) * (pv1.abs() + qv1.abs()) {
            us.push((qv0 - pv0) / (pv1 - qv1));
        } else {
            let disc = pv1 * pv1 - T::lit(4.0) * b2 * pv0;
            if disc >= T::zero() {
                let sq = disc.sqrt();
                us.push((-pv1 + sq) / (two * b2));
                us.push((-pv1 - sq) / (two * b2));
            }
        }
        let denom = T::one() + v * v - two * v * cb;
        if !(denom > T::zero()) {
            continue;
        }
        let s1 = (b2 / denom).sqrt();
        for u in us {
            if !(u > T::zero()) {
                continue;
            }
            let s = polish_depths(&f, [a2, b2, c2], Vector3::new(s1, u * s1, v * s1));
            let y = [f[0] * s[0], f[1] * s[1], f[2] * s[2]];
            let Ok((r, t)) = weighted_procrustes(&x, &y, &[T::one(); 3]) else {
                continue;
            };
            let pose = Pose::new(r, t);
            let ok = obs.iter().all(|o| {
                point_algebraic_residual(&pose, o).norm() < accept * scale.max(T::one())
                    && pose.transform(&o.x).z > T::zero()
            });
            if ok && !poses.iter().any(|p| (p.rotation - r).norm() < accept * T::lit(0.1)) {
                poses.push(pose);
            }
        }
    }
    Ok(poses)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub max_iters: usize,
    pub confidence: f64,
    /// Gate on the covariance-weighted squared residual.
    pub tau2: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            confidence: 0.99,
            tau2: DEFAULT_TAU2,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau2 > 0.0) {
            return Err(Error::InvalidInput("tau2 must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidInput("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Covariance-weighted squared reprojection residual of every feature
/// (points, then lines); `None` for features behind the camera.
pub fn mahalanobis_residuals<T: Real>(pose: &Pose<T>, corr: &Correspondences<T>) -> Vec<Option<T>> {
    let pts = corr.points.iter().map(|p| {
        let r = gold_point_residual(pose, p).ok()?;
        let info = information2(&gold_point_covariance(pose, p).ok()?).ok()?;
        Some(r.dot(&(info * r)))
    });
    let lns = corr.lines.iter().map(|l| {
        let r = gold_line_residual(pose, l).ok()?;
        let info = information2(&gold_line_covariance(pose, l).ok()?).ok()?;
        Some(r.dot(&(info * r)))
    });
    pts.chain(lns).collect()
}

/// Inlier mask (points, then lines) for `m < tau2`.
pub fn gate<T: Real>(pose: &Pose<T>, corr: &Correspondences<T>, tau2: f64) -> Vec<bool> {
    mahalanobis_residuals(pose, corr)
        .into_iter()
        .map(|m| m.is_some_and(|m| m < T::lit(tau2)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult<T: Real> {
    pub pose: Pose<T>,
    /// Point inlier mask.
    pub inliers: Vec<bool>,
    pub n_inliers: usize,
    /// Summed weighted residual over the inliers.
    pub score: T,
    pub iterations: usize,
}

/// RANSAC over three-point samples of the point correspondences.
pub fn ransac<T: Real>(points: &[PointObservation<T>], config: &RansacConfig) -> Result<RansacResult<T>> {
    config.validate()?;
    let n = points.len();
    if n < 3 {
        return Err(Error::NotEnoughCorrespondences { required: 3, actual: n });
    }
    let corr = Correspondences::points_only(points.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut best: Option<RansacResult<T>> = None;
    let mut required = config.max_iters;
    let mut it = 0;
    while it < required.min(config.max_iters) {
        it += 1;
        let idx = sample(&mut rng, n, 3);
        let triple = [points[idx.index(0)], points[idx.index(1)], points[idx.index(2)]];
        let Ok(cands) = p3p(&triple) else {
            continue;
        };
        for pose in cands {
            let m = mahalanobis_residuals(&pose, &corr);
            let mut count = 0;
            let mut score = T::zero();
            let inliers: Vec<bool> = m
                .iter()
                .map(|m| match m {
                    Some(m) if *m < T::lit(config.tau2) => {
                        count += 1;
                        score += *m;
                        true
                    }
                    _ => false,
                })
                .collect();
            let better = match &best {
                None => count >= 3,
                Some(b) => count > b.n_inliers || (count == b.n_inliers && score < b.score),
            };
            if better {
                best = Some(RansacResult {
                    pose,
                    inliers,
                    n_inliers: count,
                    score,
                    iterations: it,
                });
                let w = count as f64 / n as f64;
                let denom = (1.0 - w.powi(3)).ln();
                required = if denom < 0.0 {
                    ((1.0 - config.confidence).ln() / denom).ceil().max(1.0) as usize
                } else {
                    config.max_iters
                };
            }
        }
    }
    let mut best = best.ok_or(Error::NoModelFound)?;
    best.iterations = it;
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverFamily {
    /// No solver: the RANSAC hypothesis goes straight to refinement.
    P3p,
    Epnp,
    Dls,
}

/// A pose solver variant, e.g. `epnplu` or `dlsu*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SolverChoice {
    pub family: SolverFamily,
    pub lines: bool,
    pub uncertain: bool,
    /// Depths and rotated covariances come from a pose hypothesis.
    pub starred: bool,
}

impl SolverChoice {
    pub fn new(family: SolverFamily, lines: bool, uncertain: bool, starred: bool) -> Self {
        Self {
            family,
            lines,
            uncertain,
            starred: starred && uncertain,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let (base, starred) = match name.strip_suffix('*') {
            Some(b) => (b, true),
            None => (name, false),
        };
        let (family, rest) = if let Some(r) = base.strip_prefix("epnp") {
            (SolverFamily::Epnp, r)
        } else if let Some(r) = base.strip_prefix("dls") {
            (SolverFamily::Dls, r)
        } else if base == "p3p" {
            (SolverFamily::P3p, "")
        } else {
            return Err(Error::InvalidInput(format!("unknown method '{name}'")));
        };
        let (lines, uncertain) = match rest {
            "" => (false, false),
            "l" => (true, false),
            "u" => (false, true),
            "lu" => (true, true),
            _ => return Err(Error::InvalidInput(format!("unknown method '{name}'"))),
        };
        if starred && !uncertain {
            return Err(Error::InvalidInput(format!("'{name}': only uncertainty-aware methods take a hypothesis")));
        }
        Ok(Self::new(family, lines, uncertain, starred))
    }

    pub fn name(&self) -> String {
        let base = match self.family {
            SolverFamily::P3p => return "p3p".into(),
            SolverFamily::Epnp => "epnp",
            SolverFamily::Dls => "dls",
        };
        format!(
            "{base}{}{}{}",
            if self.lines { "l" } else { "" },
            if self.uncertain { "u" } else { "" },
            if self.starred { "*" } else { "" }
        )
    }

    /// The same solver without uncertainty weighting.
    pub fn plain(&self) -> Self {
        Self::new(self.family, self.lines, false, false)
    }
}

/// Runs a solver choice. Starred solvers need `hypothesis`; the other
/// uncertainty-aware solvers need `d_bar`.
pub fn solve<T: Real>(
    choice: &SolverChoice,
    corr: &Correspondences<T>,
    hypothesis: Option<&Pose<T>>,
    d_bar: Option<T>,
) -> Result<Pose<T>> {
    let corr = if choice.lines { corr.clone() } else { corr.without_lines() };
    let weighting = if !choice.uncertain {
        Weighting::Identity
    } else if choice.starred {
        let h = hypothesis.ok_or_else(|| Error::InvalidInput("starred solver needs a pose hypothesis".into()))?;
        Weighting::Uncertainty(DepthSource::Hypothesis(*h))
    } else {
        let d = d_bar.ok_or_else(|| Error::InvalidInput("uncertainty-aware solver needs a scene depth".into()))?;
        Weighting::Uncertainty(DepthSource::Scene(SceneDepth::new(d)?))
    };
    match choice.family {
        SolverFamily::P3p => hypothesis
            .copied()
            .ok_or_else(|| Error::InvalidInput("p3p needs the RANSAC hypothesis".into())),
        SolverFamily::Epnp => Ok(solve_epnpu(&corr, &EpnpConfig::new(weighting))?.pose),
        SolverFamily::Dls => Ok(solve_dlsu(&corr, &DlsConfig::new(weighting))?.pose),
    }
}

/// Which features the refinement sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LineRouting {
    /// Lines join the refinement only for line-aware solvers.
    #[default]
    LineAwareOnly,
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig<T: Real> {
    pub ransac: RansacConfig,
    pub regate_tau2: f64,
    /// `None` skips refinement.
    pub refine: Option<RefineConfig>,
    pub line_routing: LineRouting,
    /// Scene depth for non-starred uncertainty-aware solvers; defaults to the
    /// mean inlier depth under the RANSAC pose.
    pub d_bar: Option<T>,
}

impl<T: Real> Default for PipelineConfig<T> {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            regate_tau2: REGATE_TAU2,
            refine: Some(RefineConfig::default()),
            line_routing: LineRouting::default(),
            d_bar: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub ransac: Duration,
    pub solver: Duration,
    pub refine: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult<T: Real> {
    pub pose: Pose<T>,
    /// Features used by the final stage (points, then lines).
    pub inliers: Vec<bool>,
    pub ransac_pose: Pose<T>,
    pub timings: StageTimings,
    pub solver_failed_fallback_to_ransac: bool,
}

impl<T: Real> PipelineResult<T> {
    pub fn n_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Full pipeline with one of the built-in solvers.
pub fn run_pipeline<T: Real>(
    corr: &Correspondences<T>,
    choice: &SolverChoice,
    config: &PipelineConfig<T>,
) -> Result<PipelineResult<T>> {
    run_pipeline_with(corr, choice.lines, config, |inliers, hypothesis, d_bar| {
        solve(choice, inliers, Some(hypothesis), Some(d_bar))
    })
}

/// Pipeline with a caller-supplied solver receiving the inlier set, the
/// RANSAC pose and a scene depth.
pub fn run_pipeline_with<T: Real, F>(
    corr: &Correspondences<T>,
    line_aware: bool,
    config: &PipelineConfig<T>,
    solver: F,
) -> Result<PipelineResult<T>>
where
    F: FnOnce(&Correspondences<T>, &Pose<T>, T) -> Result<Pose<T>>,
{
    corr.validate()?;
    let np = corr.points.len();
    let use_lines = line_aware || config.line_routing == LineRouting::Always;
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let rs = ransac(&corr.points, &config.ransac)?;
    timings.ransac = clock.elapsed();

    // lines are gated with the RANSAC pose; point inliers come from RANSAC
    let mut mask = gate(&rs.pose, corr, config.ransac.tau2);
    mask[..np].copy_from_slice(&rs.inliers);
    if !line_aware {
        mask[np..].iter_mut().for_each(|m| *m = false);
    }
    let inlier_set = corr.select(&mask);
    let d_bar = config.d_bar.unwrap_or_else(|| inlier_set.mean_depth(&rs.pose));

    let clock = Instant::now();
    let solved = solver(&inlier_set, &rs.pose, d_bar);
    timings.solver = clock.elapsed();

    let routed = |m: Vec<bool>| -> Vec<bool> {
        m.into_iter()
            .enumerate()
            .map(|(i, b)| b && (i < np || use_lines))
            .collect()
    };
    let accepted = solved.ok().and_then(|pose| {
        let m = routed(gate(&pose, corr, config.regate_tau2));
        (m.iter().filter(|&&b| b).count() >= 3).then_some((pose, m))
    });
    let fallback = accepted.is_none();
    if fallback {
        debug!("solver failed or kept fewer than 3 inliers; using the RANSAC pose");
    }
    let (pose, mask) = accepted.unwrap_or_else(|| (rs.pose, routed(gate(&rs.pose, corr, config.regate_tau2))));

    let clock = Instant::now();
    let final_pose = match &config.refine {
        Some(rc) => match refine(&pose, &corr.select(&mask), rc) {
            Ok(r) => r.pose,
            Err(e) => {
                debug!("refinement skipped: {e}");
                pose
            }
        },
        None => pose,
    };
    timings.refine = clock.elapsed();

    Ok(PipelineResult {
        pose: final_pose,
        inliers: mask,
        ransac_pose: rs.pose,
        timings,
        solver_failed_fallback_to_ransac: fallback,
    })
}
