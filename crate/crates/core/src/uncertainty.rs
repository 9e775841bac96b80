//! Feature covariances: pyramid-level detection noise, first-order
//! triangulation error propagation for points and segment endpoints, and the
//! isotropic `tr Σ / 3` approximation.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{project, projection_jacobian, Pose};
use crate::linalg::information2;
use crate::scalar::Real;

/// Multiscale detector model: the noise at pyramid level `o` (1-based) is
/// `σ_o = κ^(o−1) ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidDetectorSpec<T: Real> {
    pub kappa: T,
    pub n_levels: usize,
    pub epsilon: T,
}

impl<T: Real> PyramidDetectorSpec<T> {
    pub fn new(kappa: T, n_levels: usize, epsilon: T) -> Result<Self> {
        if !(kappa > T::one()) || n_levels == 0 || !(epsilon > T::zero()) {
            return Err(Error::InvalidInput(
                "pyramid needs kappa > 1, at least one level and epsilon > 0".into(),
            ));
        }
        Ok(Self {
            kappa,
            n_levels,
            epsilon,
        })
    }
}

/// Returns `(Σᵤ, σ_l²)` for a feature detected at pyramid `level`.
pub fn pyramid_covariance<T: Real>(
    spec: &PyramidDetectorSpec<T>,
    level: usize,
) -> Result<(Matrix2<T>, T)> {
    if level == 0 || level > spec.n_levels {
        return Err(Error::LevelOutOfRange {
            level,
            n_levels: spec.n_levels,
        });
    }
    let sigma = spec.epsilon * spec.kappa.powi(level as i32 - 1);
    let var = sigma * sigma;
    Ok((Matrix2::identity() * var, var))
}

/// Frobenius-optimal scalar `s` in `Σ ≈ s I`, i.e. `tr Σ / 3`.
pub fn isotropic_approximation<T: Real>(cov: &Matrix3<T>) -> T {
    cov.trace() / T::lit(3.0)
}

/// Point detection in one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointView<T: Real> {
    pub pose: Pose<T>,
    pub u: Vector2<T>,
    pub cov_u: Matrix2<T>,
}

/// Segment endpoints detected in the reference view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentView<T: Real> {
    pub pose: Pose<T>,
    pub a: Vector2<T>,
    pub b: Vector2<T>,
    pub cov_a: Matrix2<T>,
    pub cov_b: Matrix2<T>,
}

/// Infinite line detected in a secondary view (normalized coefficients).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineView<T: Real> {
    pub pose: Pose<T>,
    pub l: Vector3<T>,
    pub sigma_l2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangulatedPoint<T: Real> {
    pub x: Vector3<T>,
    pub cov: Matrix3<T>,
    /// Condition number of the Gauss-Newton information matrix.
    pub condition: T,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangulatedSegment<T: Real> {
    pub p: Vector3<T>,
    pub q: Vector3<T>,
    pub cov_p: Matrix3<T>,
    pub cov_q: Matrix3<T>,
    /// `p`–`q` cross-covariance block; the line residual model treats the
    /// endpoints as independent, so downstream code ignores it.
    pub cross_cov: Matrix3<T>,
    pub condition: T,
    pub iterations: usize,
}

const MAX_ITERS: usize = 50;
const MIN_ANGLE: f64 = 1e-4;

fn camera_center<T: Real>(pose: &Pose<T>) -> Vector3<T> {
    -(pose.rotation.transpose() * pose.translation)
}

fn world_ray<T: Real>(pose: &Pose<T>, u: &Vector2<T>) -> Vector3<T> {
    (pose.rotation.transpose() * Vector3::new(u.x, u.y, T::one())).normalize()
}

/// Least-squares ray intersection (midpoint for two views).
fn midpoint<T: Real>(views: &[PointView<T>]) -> Result<Vector3<T>> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for v in views {
        let d = world_ray(&v.pose, &v.u);
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * camera_center(&v.pose);
    }
    a.lu().solve(&b).ok_or(Error::DegenerateBaseline)
}

fn max_ray_angle<T: Real>(rays: &[Vector3<T>]) -> T {
    let mut best = T::zero();
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            let s = rays[i].cross(&rays[j]).norm();
            let c = rays[i].dot(&rays[j]);
            best = best.max(s.atan2(c));
        }
    }
    best
}

/// Stacked, whitened Gauss-Newton loop shared by point and segment
/// triangulation. `residuals` fills (r, J) rows with `Σ⁻½` already applied.
fn gauss_newton<T: Real>(
    mut params: DVector<T>,
    mut residuals: impl FnMut(&DVector<T>) -> Result<(DVector<T>, DMatrix<T>)>,
) -> Result<(DVector<T>, DMatrix<T>, T, usize)> {
    let n = params.len();
    for it in 0..MAX_ITERS {
        let (r, j) = residuals(&params)?;
        let info = j.transpose() * &j;
        let step = info
            .clone()
            .cholesky()
            .ok_or(Error::DegenerateBaseline)?
            .solve(&(-(j.transpose() * r)));
        params += &step;
        if step.norm() <= T::lit(1e-12) * (T::one() + params.norm()) {
            let (_, j) = residuals(&params)?;
            let info = j.transpose() * &j;
            let eig = info.clone().symmetric_eigenvalues();
            let cond = eig.max() / eig.min().max(T::lit(f64::MIN_POSITIVE));
            let cov = info
                .cholesky()
                .ok_or(Error::DegenerateBaseline)?
                .inverse();
            debug_assert_eq!(cov.nrows(), n);
            return Ok((params, cov, cond, it + 1));
        }
    }
    Err(Error::NoConvergence(MAX_ITERS))
}

fn sqrt_information<T: Real>(cov: &Matrix2<T>) -> Result<Matrix2<T>> {
    let info = information2(cov)?;
    let chol = nalgebra::Cholesky::new((info + info.transpose()) * T::lit(0.5))
        .ok_or(Error::DegenerateBaseline)?;
    Ok(chol.l().transpose())
}

/// Triangulates a point from `≥ 2` views by Gauss-Newton on the whitened
/// reprojection residuals (midpoint initialization) and returns the
/// first-order covariance `(Jᵀ Σ⁻¹ J)⁻¹`.
pub fn triangulate_point_with_covariance<T: Real>(
    views: &[PointView<T>],
) -> Result<TriangulatedPoint<T>> {
    if views.len() < 2 {
        return Err(Error::NotEnoughCorrespondences {
            required: 2,
            actual: views.len(),
        });
    }
    let rays: Vec<_> = views.iter().map(|v| world_ray(&v.pose, &v.u)).collect();
    if max_ray_angle(&rays) < T::lit(MIN_ANGLE) {
        return Err(Error::DegenerateBaseline);
    }
    let whiten: Vec<Matrix2<T>> = views
        .iter()
        .map(|v| sqrt_information(&v.cov_u))
        .collect::<Result<_>>()?;
    let x0 = midpoint(views)?;
    let m = views.len();
    let (x, cov, condition, iterations) =
        gauss_newton(DVector::from_column_slice(x0.as_slice()), |p| {
            let x = Vector3::new(p[0], p[1], p[2]);
            let mut r = DVector::zeros(2 * m);
            let mut j = DMatrix::zeros(2 * m, 3);
            for (k, (v, w)) in views.iter().zip(&whiten).enumerate() {
                let xc = v.pose.transform(&x);
                if xc.z <= T::zero() {
                    return Err(Error::DegenerateBaseline);
                }
                let res = w * (v.u - project(&xc)?);
                let jac = -(w * projection_jacobian(&xc)? * v.pose.rotation);
                r.fixed_rows_mut::<2>(2 * k).copy_from(&res);
                j.fixed_view_mut::<2, 3>(2 * k, 0).copy_from(&jac);
            }
            Ok((r, j))
        })?;
    Ok(TriangulatedPoint {
        x: Vector3::new(x[0], x[1], x[2]),
        cov: cov.fixed_view::<3, 3>(0, 0).into_owned(),
        condition,
        iterations,
    })
}

/// Intersects the reference-view ray through `u` with the plane spanned by
/// `line`'s camera centre and image line.
fn ray_plane<T: Real>(reference: &Pose<T>, u: &Vector2<T>, line: &LineView<T>) -> Result<Vector3<T>> {
    let c1 = camera_center(reference);
    let d = world_ray(reference, u);
    let n = line.pose.rotation.transpose() * line.l;
    let n = n / n.norm();
    let denom = n.dot(&d);
    if denom.abs() < T::lit(MIN_ANGLE) {
        return Err(Error::DegenerateBaseline);
    }
    let lambda = n.dot(&(camera_center(&line.pose) - c1)) / denom;
    if lambda <= T::zero() {
        return Err(Error::DegenerateBaseline);
    }
    Ok(c1 + d * lambda)
}

/// Triangulates a segment from its endpoint detections in the reference
/// view and infinite-line detections in the other views.
///
/// Unknowns are the two endpoints; the reference view contributes
/// reprojection residuals of both endpoints, every other view contributes
/// the signed distances of the projected endpoints from its line.
pub fn triangulate_line_with_covariance<T: Real>(
    reference: &SegmentView<T>,
    others: &[LineView<T>],
) -> Result<TriangulatedSegment<T>> {
    if others.is_empty() {
        return Err(Error::NotEnoughCorrespondences {
            required: 2,
            actual: 1,
        });
    }
    let p0 = ray_plane(&reference.pose, &reference.a, &others[0])?;
    let q0 = ray_plane(&reference.pose, &reference.b, &others[0])?;
    let wa = sqrt_information(&reference.cov_a)?;
    let wb = sqrt_information(&reference.cov_b)?;
    let inv_sigma: Vec<T> = others
        .iter()
        .map(|v| {
            if v.sigma_l2 > T::zero() {
                Ok(T::one() / v.sigma_l2.sqrt())
            } else {
                Err(Error::InvalidInput("line variance must be positive".into()))
            }
        })
        .collect::<Result<_>>()?;
    let rows = 4 + 2 * others.len();
    let mut x0 = DVector::zeros(6);
    x0.fixed_rows_mut::<3>(0).copy_from(&p0);
    x0.fixed_rows_mut::<3>(3).copy_from(&q0);
    let (x, cov, condition, iterations) = gauss_newton(x0, |prm| {
        let p = Vector3::new(prm[0], prm[1], prm[2]);
        let q = Vector3::new(prm[3], prm[4], prm[5]);
        let mut r = DVector::zeros(rows);
        let mut j = DMatrix::zeros(rows, 6);
        for (k, (pt, obs, w)) in [(p, reference.a, wa), (q, reference.b, wb)].into_iter().enumerate() {
            let xc = reference.pose.transform(&pt);
            if xc.z <= T::zero() {
                return Err(Error::DegenerateBaseline);
            }
            r.fixed_rows_mut::<2>(2 * k).copy_from(&(w * (obs - project(&xc)?)));
            let jac = -(w * projection_jacobian(&xc)? * reference.pose.rotation);
            j.fixed_view_mut::<2, 3>(2 * k, 3 * k).copy_from(&jac);
        }
        for (v_idx, (view, &s)) in others.iter().zip(&inv_sigma).enumerate() {
            let l12 = Vector2::new(view.l.x, view.l.y);
            for (k, pt) in [p, q].into_iter().enumerate() {
                let xc = view.pose.transform(&pt);
                if xc.z <= T::zero() {
                    return Err(Error::DegenerateBaseline);
                }
                let uv = project(&xc)?;
                let row = 4 + 2 * v_idx + k;
                r[row] = s * (l12.dot(&uv) + view.l.z);
                let g = (projection_jacobian(&xc)? * view.pose.rotation).transpose() * l12 * s;
                for c in 0..3 {
                    j[(row, 3 * k + c)] = g[c];
                }
            }
        }
        Ok((r, j))
    })?;
    Ok(TriangulatedSegment {
        p: Vector3::new(x[0], x[1], x[2]),
        q: Vector3::new(x[3], x[4], x[5]),
        cov_p: cov.fixed_view::<3, 3>(0, 0).into_owned(),
        cov_q: cov.fixed_view::<3, 3>(3, 3).into_owned(),
        cross_cov: cov.fixed_view::<3, 3>(0, 3).into_owned(),
        condition,
        iterations,
    })
}
