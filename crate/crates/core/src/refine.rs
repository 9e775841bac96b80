//! Motion-only bundle adjustment on reprojection residuals.
//!
//! Three regimes differ only in the residual covariances: fixed detection
//! covariances (`Standard`), pose-dependent covariances refreshed before each
//! Gauss-Newton step (`IterativeUncertain`), and the exact objective with the
//! pose dependence of the covariances differentiated through
//! (`FullUncertain`).
//!
//! Poses are updated on the manifold: `R ← exp(δω) R`, `t ← t + δt`.

use log::debug;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, SMatrix, SVector, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{project, projection_jacobian, skew, so3_exp, Pose};
use crate::linalg::{information2, whitening2};
use crate::problem::Correspondences;
use crate::residuals::{
    gold_line_covariance, gold_line_residual, gold_point_covariance, gold_point_residual,
    LineObservation, PointObservation,
};
use crate::scalar::Real;

pub type Vector6<T> = SVector<T, 6>;
pub type Matrix6<T> = SMatrix<T, 6, 6>;
pub type Matrix2x6<T> = SMatrix<T, 2, 6>;
pub type Matrix3x6<T> = SMatrix<T, 3, 6>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefineRegime {
    #[default]
    Standard,
    FullUncertain,
    IterativeUncertain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub regime: RefineRegime,
    pub max_iters: usize,
    /// Convergence threshold on the norm of the pose update.
    pub step_tol: f64,
    /// Convergence threshold on the relative cost decrease.
    pub cost_tol: f64,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            regime: RefineRegime::Standard,
            max_iters: 20,
            step_tol: 1e-10,
            cost_tol: 1e-12,
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
        }
    }
}

impl RefineConfig {
    pub fn with_regime(regime: RefineRegime) -> Self {
        Self {
            regime,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult<T: Real> {
    pub pose: Pose<T>,
    /// Cost before the first iteration and after every accepted step.
    pub cost_trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest number of features skipped in one linearization because they
    /// were behind the camera.
    pub skipped_features: usize,
}

/// `R ← exp(ω) R`, `t ← t + δt` with `δ = (ω, δt)`.
pub fn retract<T: Real>(pose: &Pose<T>, delta: &Vector6<T>) -> Pose<T> {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    Pose::new(so3_exp(&w) * pose.rotation, pose.translation + dt)
}

/// `∂x̂/∂δ` for `x̂ = R x + t`.
fn point_motion<T: Real>(pose: &Pose<T>, x: &Vector3<T>) -> Matrix3x6<T> {
    let mut d = Matrix3x6::zeros();
    d.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&(pose.rotation * x))));
    d.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    d
}

/// Reprojection residual of a point and its Jacobian with respect to the
/// pose perturbation.
pub fn point_jacobian<T: Real>(pose: &Pose<T>, obs: &PointObservation<T>) -> Result<(Vector2<T>, Matrix2x6<T>)> {
    let xh = pose.transform(&obs.x);
    if xh.z <= T::zero() {
        return Err(Error::DepthZero);
    }
    let r = obs.u - project(&xh)?;
    let j = -(projection_jacobian(&xh)? * point_motion(pose, &obs.x));
    Ok((r, j))
}

/// Point-to-line distances of both projected endpoints and their Jacobian.
pub fn line_jacobian<T: Real>(pose: &Pose<T>, obs: &LineObservation<T>) -> Result<(Vector2<T>, Matrix2x6<T>)> {
    let r = gold_line_residual(pose, obs)?;
    let l12 = Vector2::new(obs.l.x, obs.l.y);
    let mut j = Matrix2x6::zeros();
    for (k, x) in [obs.p, obs.q].iter().enumerate() {
        let xh = pose.transform(x);
        let row = l12.transpose() * projection_jacobian(&xh)? * point_motion(pose, x);
        j.set_row(k, &row);
    }
    Ok((r, j))
}

/// Directional derivative of the projection Jacobian along `v`.
fn projection_jacobian_derivative<T: Real>(x: &Vector3<T>, v: &Vector3<T>) -> Matrix2x3<T> {
    let iz = T::one() / x.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let two = T::lit(2.0);
    Matrix2x3::new(
        -v.z * iz2,
        T::zero(),
        -v.x * iz2 + two * x.x * v.z * iz3,
        T::zero(),
        -v.z * iz2,
        -v.y * iz2 + two * x.y * v.z * iz3,
    )
}

/// Derivatives of `P = J_π(x̂) R` along the six pose directions.
fn projected_rotation_derivatives<T: Real>(pose: &Pose<T>, x: &Vector3<T>) -> Result<(Matrix2x3<T>, [Matrix2x3<T>; 6])> {
    let xh = pose.transform(x);
    let jp = projection_jacobian(&xh)?;
    let motion = point_motion(pose, x);
    let p = jp * pose.rotation;
    let dp = std::array::from_fn(|k| {
        let v: Vector3<T> = motion.column(k).into_owned();
        let mut d = projection_jacobian_derivative(&xh, &v) * pose.rotation;
        if k < 3 {
            d += jp * skew(&Vector3::from_fn(|i, _| if i == k { T::one() } else { T::zero() })) * pose.rotation;
        }
        d
    });
    Ok((p, dp))
}

/// Exact uncertain objective `Σ rᵀ Σ(θ)⁻¹ r`, skipping features behind the
/// camera. Returns the cost and the number of features used.
pub fn full_objective<T: Real>(pose: &Pose<T>, corr: &Correspondences<T>) -> (T, usize) {
    let mut cost = T::zero();
    let mut used = 0;
    for p in &corr.points {
        if let (Ok(r), Ok(cov)) = (gold_point_residual(pose, p), gold_point_covariance(pose, p)) {
            if let Ok(info) = information2(&cov) {
                cost += r.dot(&(info * r));
                used += 1;
            }
        }
    }
    for l in &corr.lines {
        if let (Ok(r), Ok(cov)) = (gold_line_residual(pose, l), gold_line_covariance(pose, l)) {
            if let Ok(info) = information2(&cov) {
                cost += r.dot(&(info * r));
                used += 1;
            }
        }
    }
    (cost, used)
}

/// Analytic gradient of [`full_objective`], including the derivative of the
/// covariances with respect to the pose.
pub fn full_gradient<T: Real>(pose: &Pose<T>, corr: &Correspondences<T>) -> Vector6<T> {
    let mut g = Vector6::zeros();
    let two = T::lit(2.0);
    for obs in &corr.points {
        let Ok((r, j)) = point_jacobian(pose, obs) else {
            continue;
        };
        let Ok((p, dp)) = projected_rotation_derivatives(pose, &obs.x) else {
            continue;
        };
        let cov = obs.cov_u + p * obs.cov_x * p.transpose();
        let Ok(info) = information2(&cov) else {
            continue;
        };
        let ir = info * r;
        for k in 0..6 {
            let d_cov = dp[k] * obs.cov_x * p.transpose() + p * obs.cov_x * dp[k].transpose();
            let dr: Vector2<T> = j.column(k).into_owned();
            g[k] += two * ir.dot(&dr) - ir.dot(&(d_cov * ir));
        }
    }
    for obs in &corr.lines {
        let Ok((r, j)) = line_jacobian(pose, obs) else {
            continue;
        };
        let l12 = Vector2::new(obs.l.x, obs.l.y);
        for (e, (x, cov_x)) in [(obs.p, obs.cov_p), (obs.q, obs.cov_q)].iter().enumerate() {
            let Ok((p, dp)) = projected_rotation_derivatives(pose, x) else {
                continue;
            };
            let gp = p.transpose() * l12;
            let var = obs.sigma_l2 + gp.dot(&(cov_x * gp));
            if !(var > T::zero()) {
                continue;
            }
            for k in 0..6 {
                let dvar = two * (dp[k].transpose() * l12).dot(&(cov_x * gp));
                g[k] += two * r[e] * j[(e, k)] / var - r[e] * r[e] * dvar / (var * var);
            }
        }
    }
    g
}

/// Covariances used by the Gauss-Newton regimes.
fn regime_covariances<T: Real>(
    pose: &Pose<T>,
    corr: &Correspondences<T>,
    regime: RefineRegime,
) -> Vec<Option<Matrix2<T>>> {
    let pts = corr.points.iter().map(|p| match regime {
        RefineRegime::Standard => Some(p.cov_u),
        _ => gold_point_covariance(pose, p).ok(),
    });
    let lns = corr.lines.iter().map(|l| match regime {
        RefineRegime::Standard => Some(Matrix2::identity() * l.sigma_l2),
        _ => gold_line_covariance(pose, l).ok(),
    });
    pts.chain(lns).collect()
}

fn whitening_for<T: Real>(covs: &[Option<Matrix2<T>>]) -> Vec<Option<Matrix2<T>>> {
    covs.iter()
        .map(|c| c.and_then(|c| whitening2(&c).ok()))
        .collect()
}

/// Whitened cost under fixed whitening factors; features that cannot be
/// evaluated are counted separately.
fn fixed_cost<T: Real>(pose: &Pose<T>, corr: &Correspondences<T>, w: &[Option<Matrix2<T>>]) -> (T, usize) {
    let mut cost = T::zero();
    let mut used = 0;
    let np = corr.points.len();
    for (p, w) in corr.points.iter().zip(&w[..np]) {
        if let (Some(w), Ok(r)) = (w, gold_point_residual(pose, p)) {
            cost += (w * r).norm_squared();
            used += 1;
        }
    }
    for (l, w) in corr.lines.iter().zip(&w[np..]) {
        if let (Some(w), Ok(r)) = (w, gold_line_residual(pose, l)) {
            cost += (w * r).norm_squared();
            used += 1;
        }
    }
    (cost, used)
}

/// Whitened normal equations `(JᵀJ, Jᵀr)`.
fn normal_equations<T: Real>(
    pose: &Pose<T>,
    corr: &Correspondences<T>,
    w: &[Option<Matrix2<T>>],
) -> (Matrix6<T>, Vector6<T>, usize) {
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    let mut skipped = 0;
    let np = corr.points.len();
    let mut add = |w: &Matrix2<T>, r: Vector2<T>, j: Matrix2x6<T>| {
        let wj = w * j;
        jtj += wj.transpose() * wj;
        jtr += wj.transpose() * (w * r);
    };
    for (p, w) in corr.points.iter().zip(&w[..np]) {
        match (w, point_jacobian(pose, p)) {
            (Some(w), Ok((r, j))) => add(w, r, j),
            _ => skipped += 1,
        }
    }
    for (l, w) in corr.lines.iter().zip(&w[np..]) {
        match (w, line_jacobian(pose, l)) {
            (Some(w), Ok((r, j))) => add(w, r, j),
            _ => skipped += 1,
        }
    }
    (jtj, jtr, skipped)
}

/// Refines `pose0` under the configured regime.
pub fn refine<T: Real>(pose0: &Pose<T>, corr: &Correspondences<T>, config: &RefineConfig) -> Result<RefineResult<T>> {
    if corr.len() < 3 {
        return Err(Error::NotEnoughCorrespondences {
            required: 3,
            actual: corr.len(),
        });
    }
    if !pose0.is_valid(T::lit(1e-6)) {
        return Err(Error::InvalidInput("initial pose is not a rigid transform".into()));
    }
    match config.regime {
        RefineRegime::FullUncertain => refine_full(pose0, corr, config),
        regime => refine_gauss_newton(pose0, corr, config, regime),
    }
}

fn converged_by<T: Real>(step: &Vector6<T>, before: T, after: T, config: &RefineConfig) -> bool {
    let rel = (before - after) / before.max(T::lit(f64::MIN_POSITIVE));
    step.norm() < T::lit(config.step_tol) || rel < T::lit(config.cost_tol)
}

fn refine_gauss_newton<T: Real>(
    pose0: &Pose<T>,
    corr: &Correspondences<T>,
    config: &RefineConfig,
    regime: RefineRegime,
) -> Result<RefineResult<T>> {
    let refresh = regime == RefineRegime::IterativeUncertain;
    let mut pose = *pose0;
    let mut w = whitening_for(&regime_covariances(&pose, corr, regime));
    let (mut cost, mut used) = fixed_cost(&pose, corr, &w);
    let mut trace = vec![cost];
    let mut lambda = T::lit(config.lambda0);
    let mut skipped_max = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        if refresh && iterations > 1 {
            w = whitening_for(&regime_covariances(&pose, corr, regime));
            let (c, u) = fixed_cost(&pose, corr, &w);
            cost = c;
            used = u;
            trace.push(cost);
        }
        let (jtj, jtr, skipped) = normal_equations(&pose, corr, &w);
        if skipped > 0 {
            debug!("refinement skipped {skipped} features behind the camera");
        }
        skipped_max = skipped_max.max(skipped);
        let mut accepted = None;
        while lambda < T::lit(1e12) {
            let mut damped = jtj;
            for i in 0..6 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(T::lit(1e-12));
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= T::lit(config.lambda_up);
                continue;
            };
            let trial = retract(&pose, &step);
            let (c, u) = fixed_cost(&trial, corr, &w);
            if u >= used && c <= cost {
                lambda = (lambda / T::lit(config.lambda_down)).max(T::lit(1e-12));
                accepted = Some((trial, step, c));
                break;
            }
            lambda *= T::lit(config.lambda_up);
        }
        let Some((trial, step, c)) = accepted else {
            converged = true;
            break;
        };
        debug_assert!(c <= cost);
        let done = converged_by(&step, cost, c, config);
        pose = trial;
        cost = c;
        trace.push(cost);
        if done {
            converged = true;
            break;
        }
    }
    Ok(RefineResult {
        pose,
        cost_trace: trace,
        iterations,
        converged,
        skipped_features: skipped_max,
    })
}

/// Central-difference Hessian of the analytic gradient.
pub fn full_hessian<T: Real>(pose: &Pose<T>, corr: &Correspondences<T>) -> Matrix6<T> {
    let h = T::lit(1e-6);
    let mut hess = Matrix6::zeros();
    for k in 0..6 {
        let mut e = Vector6::zeros();
        e[k] = h;
        let gp = full_gradient(&retract(pose, &e), corr);
        let gm = full_gradient(&retract(pose, &(-e)), corr);
        hess.set_column(k, &((gp - gm) / (h + h)));
    }
    (hess + hess.transpose()) * T::lit(0.5)
}

fn refine_full<T: Real>(pose0: &Pose<T>, corr: &Correspondences<T>, config: &RefineConfig) -> Result<RefineResult<T>> {
    let mut pose = *pose0;
    let (mut cost, mut used) = full_objective(&pose, corr);
    let mut trace = vec![cost];
    let mut lambda = T::lit(config.lambda0);
    let mut converged = false;
    let mut iterations = 0;
    let skipped = corr.len() - used;
    while iterations < config.max_iters {
        iterations += 1;
        let g = full_gradient(&pose, corr);
        let hess = full_hessian(&pose, corr);
        let scale = (0..6)
            .fold(T::zero(), |a, i| a + hess[(i, i)].abs())
            .max(T::lit(1e-12))
            / T::lit(6.0);
        let mut accepted = None;
        while lambda < T::lit(1e12) {
            let damped = hess + Matrix6::identity() * (lambda * scale);
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= T::lit(config.lambda_up);
                continue;
            };
            let trial = retract(&pose, &step);
            let (c, u) = full_objective(&trial, corr);
            if u >= used && c <= cost {
                lambda = (lambda / T::lit(config.lambda_down)).max(T::lit(1e-12));
                accepted = Some((trial, step, c, u));
                break;
            }
            lambda *= T::lit(config.lambda_up);
        }
        let Some((trial, step, c, u)) = accepted else {
            converged = true;
            break;
        };
        let done = converged_by(&step, cost, c, config);
        pose = trial;
        cost = c;
        used = u;
        trace.push(cost);
        if done {
            converged = true;
            break;
        }
    }
    Ok(RefineResult {
        pose,
        cost_trace: trace,
        iterations,
        converged,
        skipped_features: skipped,
    })
}
