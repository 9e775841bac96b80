//! Algebraic and reprojection ("gold standard") residuals for point and line
//! correspondences, together with their first-order covariances under
//! independent Gaussian noise on the 3D model and on the 2D detections.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{project, projection_jacobian, Pose};
use crate::linalg::{is_psd2, is_psd3, whitening2};
use crate::scalar::Real;

/// 2D–3D point correspondence with its uncertainties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointObservation<T: Real> {
    /// World point.
    pub x: Vector3<T>,
    pub cov_x: Matrix3<T>,
    /// Normalized image detection.
    pub u: Vector2<T>,
    pub cov_u: Matrix2<T>,
}

/// 2D line / 3D segment correspondence.
///
/// `l` holds the normalized line coefficients (`‖l[0..2]‖ = 1`) so that
/// `lᵀ (u, 1)` is the signed distance of an image point from the line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineObservation<T: Real> {
    pub p: Vector3<T>,
    pub q: Vector3<T>,
    pub cov_p: Matrix3<T>,
    pub cov_q: Matrix3<T>,
    pub l: Vector3<T>,
    /// Variance of the point-to-line distance.
    pub sigma_l2: T,
}

/// Average scene depth used in place of per-feature depths.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SceneDepth<T: Real>(T);

impl<T: Real> SceneDepth<T> {
    pub fn new(d: T) -> Result<Self> {
        if d > T::zero() && d.is_finite() {
            Ok(Self(d))
        } else {
            Err(Error::InvalidInput("scene depth must be positive".into()))
        }
    }

    pub fn get(self) -> T {
        self.0
    }
}

/// Residual 2-vector with its covariance and whitening factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlock<T: Real> {
    pub r: Vector2<T>,
    pub cov: Matrix2<T>,
    /// `WᵀW = cov⁻¹` (after regularization).
    pub whitening: Matrix2<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(r: Vector2<T>, cov: Matrix2<T>) -> Result<Self> {
        Ok(Self {
            r,
            cov,
            whitening: whitening2(&cov)?,
        })
    }

    pub fn whitened(&self) -> Vector2<T> {
        self.whitening * self.r
    }

    /// Squared Mahalanobis norm `rᵀ Σ⁻¹ r`.
    pub fn mahalanobis2(&self) -> T {
        self.whitened().norm_squared()
    }
}

const PSD_REL: f64 = 1e-12;

impl<T: Real> PointObservation<T> {
    pub fn new(x: Vector3<T>, cov_x: Matrix3<T>, u: Vector2<T>, cov_u: Matrix2<T>) -> Self {
        Self { x, cov_x, u, cov_u }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.iter().chain(self.u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite point coordinates".into()));
        }
        if !is_psd3(&self.cov_x, T::lit(PSD_REL)) {
            return Err(Error::InvalidInput("cov_x is not symmetric positive semidefinite".into()));
        }
        if !is_psd2(&self.cov_u, T::lit(PSD_REL)) {
            return Err(Error::InvalidInput("cov_u is not symmetric positive semidefinite".into()));
        }
        Ok(())
    }
}

impl<T: Real> LineObservation<T> {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .p
            .iter()
            .chain(self.q.iter())
            .chain(self.l.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite line coordinates".into()));
        }
        let n12 = Vector2::new(self.l.x, self.l.y).norm();
        if (n12 - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::InvalidInput("line coefficients are not normalized".into()));
        }
        if !is_psd3(&self.cov_p, T::lit(PSD_REL)) || !is_psd3(&self.cov_q, T::lit(PSD_REL)) {
            return Err(Error::InvalidInput(
                "endpoint covariance is not symmetric positive semidefinite".into(),
            ));
        }
        if !(self.sigma_l2 >= T::zero()) {
            return Err(Error::InvalidInput("line variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// `l` normalized so that its first two components have unit norm.
pub fn normalize_line<T: Real>(l: &Vector3<T>) -> Result<Vector3<T>> {
    let n = Vector2::new(l.x, l.y).norm();
    if !(n > T::zero()) {
        return Err(Error::InvalidInput("line has no direction".into()));
    }
    Ok(l / n)
}

/// `x̂^(1:2) − u·x̂^(3)` with `x̂ = R x + t`.
pub fn point_algebraic_residual<T: Real>(pose: &Pose<T>, obs: &PointObservation<T>) -> Vector2<T> {
    let xh = pose.transform(&obs.x);
    Vector2::new(xh.x - obs.u.x * xh.z, xh.y - obs.u.y * xh.z)
}

/// Covariance of the algebraic point residual.
///
/// With `R Σₓ Rᵀ = [[S, w], [wᵀ, γ]]` the result is
/// `S + γ uuᵀ + d² Σᵤ − (u wᵀ + w uᵀ)`; `depth` is either the feature depth
/// under a pose hypothesis or an average scene depth.
pub fn point_residual_covariance<T: Real>(
    rotation: &Matrix3<T>,
    obs: &PointObservation<T>,
    depth: T,
) -> Matrix2<T> {
    let rot_cov = rotation * obs.cov_x * rotation.transpose();
    let s = rot_cov.fixed_view::<2, 2>(0, 0).into_owned();
    let w: Vector2<T> = rot_cov.fixed_view::<2, 1>(0, 2).into_owned();
    let gamma = rot_cov[(2, 2)];
    let u = obs.u;
    let cov = s + u * u.transpose() * gamma + obs.cov_u * (depth * depth)
        - (u * w.transpose() + w * u.transpose());
    symmetrize(&cov)
}

/// `(lᵀ p̂, lᵀ q̂)` with camera-frame endpoints.
pub fn line_algebraic_residual<T: Real>(pose: &Pose<T>, obs: &LineObservation<T>) -> Vector2<T> {
    Vector2::new(
        obs.l.dot(&pose.transform(&obs.p)),
        obs.l.dot(&pose.transform(&obs.q)),
    )
}

/// `σ_l² diag(λ_p², λ_q²) + diag(lᵀ R Σ_p Rᵀ l, lᵀ R Σ_q Rᵀ l)`.
pub fn line_residual_covariance<T: Real>(
    rotation: &Matrix3<T>,
    obs: &LineObservation<T>,
    depths: (T, T),
) -> Matrix2<T> {
    let lr = rotation.transpose() * obs.l;
    let vp = lr.dot(&(obs.cov_p * lr));
    let vq = lr.dot(&(obs.cov_q * lr));
    Matrix2::new(
        obs.sigma_l2 * depths.0 * depths.0 + vp,
        T::zero(),
        T::zero(),
        obs.sigma_l2 * depths.1 * depths.1 + vq,
    )
}

/// Point residual covariance under an isotropic 3D covariance `σ² I` and the
/// average depth: `σ² I + d̄² Σᵤ + σ² uuᵀ`.
pub fn epnp_point_residual_covariance<T: Real>(
    obs: &PointObservation<T>,
    sigma_x2: T,
    d_bar: SceneDepth<T>,
) -> Matrix2<T> {
    let d = d_bar.get();
    Matrix2::identity() * sigma_x2 + obs.cov_u * (d * d) + obs.u * obs.u.transpose() * sigma_x2
}

/// Line residual covariance under isotropic endpoint covariances and the
/// average depth: `σ_l² d̄² I + ‖l‖² diag(σ_p², σ_q²)`.
pub fn epnp_line_residual_covariance<T: Real>(
    obs: &LineObservation<T>,
    sigma_p2: T,
    sigma_q2: T,
    d_bar: SceneDepth<T>,
) -> Matrix2<T> {
    let d = d_bar.get();
    let ll = obs.l.norm_squared();
    let base = obs.sigma_l2 * d * d;
    Matrix2::new(base + ll * sigma_p2, T::zero(), T::zero(), base + ll * sigma_q2)
}

/// Reprojection residual `u − π(R x + t)`.
pub fn gold_point_residual<T: Real>(pose: &Pose<T>, obs: &PointObservation<T>) -> Result<Vector2<T>> {
    let xh = pose.transform(&obs.x);
    if xh.z <= T::zero() {
        return Err(Error::DepthZero);
    }
    Ok(obs.u - project(&xh)?)
}

/// `Σᵤ + J(x̂) R Σₓ Rᵀ J(x̂)ᵀ`.
pub fn gold_point_covariance<T: Real>(pose: &Pose<T>, obs: &PointObservation<T>) -> Result<Matrix2<T>> {
    let xh = pose.transform(&obs.x);
    if xh.z <= T::zero() {
        return Err(Error::DepthZero);
    }
    let j = projection_jacobian(&xh)? * pose.rotation;
    Ok(symmetrize(&(obs.cov_u + j * obs.cov_x * j.transpose())))
}

/// `(lᵀ π̃(p̂), lᵀ π̃(q̂))` where `π̃` is the homogeneous projection `(x/z, y/z, 1)`.
pub fn gold_line_residual<T: Real>(pose: &Pose<T>, obs: &LineObservation<T>) -> Result<Vector2<T>> {
    let dist = |x: &Vector3<T>| -> Result<T> {
        let xh = pose.transform(x);
        if xh.z <= T::zero() {
            return Err(Error::DepthZero);
        }
        let u = project(&xh)?;
        Ok(obs.l.x * u.x + obs.l.y * u.y + obs.l.z)
    };
    Ok(Vector2::new(dist(&obs.p)?, dist(&obs.q)?))
}

/// `σ_l² I + diag(l₁₂ᵀ Σ_p̂^π l₁₂, l₁₂ᵀ Σ_q̂^π l₁₂)`, `Σ^π = J R Σ Rᵀ Jᵀ`.
pub fn gold_line_covariance<T: Real>(pose: &Pose<T>, obs: &LineObservation<T>) -> Result<Matrix2<T>> {
    let l12 = Vector2::new(obs.l.x, obs.l.y);
    let var = |x: &Vector3<T>, cov: &Matrix3<T>| -> Result<T> {
        let xh = pose.transform(x);
        if xh.z <= T::zero() {
            return Err(Error::DepthZero);
        }
        let g = (projection_jacobian(&xh)? * pose.rotation).transpose() * l12;
        Ok(g.dot(&(cov * g)))
    };
    let vp = var(&obs.p, &obs.cov_p)?;
    let vq = var(&obs.q, &obs.cov_q)?;
    Ok(Matrix2::new(obs.sigma_l2 + vp, T::zero(), T::zero(), obs.sigma_l2 + vq))
}

/// Isotropic variance `tr Σ / 3`.
pub fn isotropic_variance<T: Real>(cov: &Matrix3<T>) -> T {
    cov.trace() / T::lit(3.0)
}

fn symmetrize<T: Real>(m: &Matrix2<T>) -> Matrix2<T> {
    (m + m.transpose()) * T::lit(0.5)
}
