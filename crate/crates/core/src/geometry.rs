//! Rigid transforms, the Cayley rotation parameterization and pinhole
//! projection in normalized (K = I) image coordinates.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    #[inline]
    pub fn transform(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    /// Checks `RᵀR = I` and `det R = 1` within `tol`.
    pub fn is_valid(&self, tol: T) -> bool {
        rotation_is_valid(&self.rotation, tol) && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose::new(
            self.rotation.map(|v| U::lit(v.as_f64())),
            self.translation.map(|v| U::lit(v.as_f64())),
        )
    }
}

pub fn rotation_is_valid<T: Real>(r: &Matrix3<T>, tol: T) -> bool {
    let orth = (r.transpose() * r - Matrix3::identity()).norm();
    orth <= tol && (r.determinant() - T::one()).abs() <= tol
}

#[inline]
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Rotation from Cayley parameters:
/// `R(s) = ((1 - sᵀs) I + 2 [s]ₓ + 2 s sᵀ) / (1 + sᵀs)`.
pub fn cayley_to_rotation<T: Real>(s: &Vector3<T>) -> Matrix3<T> {
    let two = T::lit(2.0);
    let ss = s.norm_squared();
    let num = Matrix3::identity() * (T::one() - ss) + skew(s) * two + s * s.transpose() * two;
    num / (T::one() + ss)
}

/// Inverse of [`cayley_to_rotation`]: `s = vee(R - Rᵀ) / (1 + tr R)`.
pub fn rotation_to_cayley<T: Real>(r: &Matrix3<T>) -> Result<Vector3<T>> {
    let denom = T::one() + r.trace();
    if denom < T::lit(1e-9) {
        return Err(Error::Singular180);
    }
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    Ok(v / denom)
}

/// Rodrigues formula, `exp([w]ₓ)`.
pub fn so3_exp<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < T::lit(1e-16) {
        (T::one() - theta2 / T::lit(6.0), T::lit(0.5) - theta2 / T::lit(24.0))
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation matrix.
pub fn so3_log<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let half = T::lit(0.5);
    let cos = ((r.trace() - T::one()) * half).clamp(-T::one(), T::one());
    let theta = cos.acos();
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < T::lit(1e-6) {
        return v * half;
    }
    if T::pi() - theta < T::lit(1e-4) {
        // axis from the symmetric part: R + I = 2 a aᵀ near θ = π
        let sym = (r + Matrix3::identity()) * half;
        let mut best = 0;
        for i in 1..3 {
            if sym[(i, i)] > sym[(best, best)] {
                best = i;
            }
        }
        let mut axis: Vector3<T> = sym.column(best).into();
        axis /= axis.norm();
        if axis.dot(&v) < T::zero() {
            axis = -axis;
        }
        return axis * theta;
    }
    v * (theta / (T::lit(2.0) * theta.sin()))
}

/// Perspective division `(x/z, y/z)`.
pub fn project<T: Real>(x: &Vector3<T>) -> Result<Vector2<T>> {
    if x.z.abs() < T::lit(1e-12) {
        return Err(Error::DepthZero);
    }
    Ok(Vector2::new(x.x / x.z, x.y / x.z))
}

/// Jacobian of [`project`] with respect to the camera-frame point.
pub fn projection_jacobian<T: Real>(x: &Vector3<T>) -> Result<Matrix2x3<T>> {
    if x.z.abs() < T::lit(1e-12) {
        return Err(Error::DepthZero);
    }
    let iz = T::one() / x.z;
    let iz2 = iz * iz;
    let z = T::zero();
    Ok(Matrix2x3::new(iz, z, -x.x * iz2, z, iz, -x.y * iz2))
}
