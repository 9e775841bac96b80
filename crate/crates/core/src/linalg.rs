//! Small dense helpers: covariance regularization, whitening, sorted
//! symmetric eigendecomposition and weighted absolute orientation.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Relative eigenvalue floor below which a covariance gets regularized.
pub const REG_TRIGGER: f64 = 1e-12;
/// Relative ridge added to a near-singular covariance.
pub const REG_EPS: f64 = 1e-10;

macro_rules! regularize_impl {
    ($name:ident, $mat:ident, $dim:expr) => {
        /// Regularizes a symmetric covariance before inversion.
        ///
        /// If the smallest eigenvalue is below `1e-12 · tr Σ`, adds
        /// `1e-10 · tr Σ / dim · I` (plus whatever lifts a negative round-off
        /// eigenvalue back to zero). A covariance with zero trace carries no
        /// scale at all and is replaced by the identity.
        pub fn $name<T: Real>(cov: &$mat<T>) -> $mat<T> {
            let sym = (cov + cov.transpose()) * T::lit(0.5);
            let tr = sym.trace();
            if !(tr > T::zero()) || !tr.is_finite() {
                return $mat::identity();
            }
            let min_eig = sym.symmetric_eigenvalues().min();
            if min_eig < T::lit(REG_TRIGGER) * tr {
                let ridge = T::lit(REG_EPS) * tr / T::lit($dim);
                let lift = if min_eig < T::zero() { -min_eig } else { T::zero() };
                sym + $mat::identity() * (ridge + lift)
            } else {
                sym
            }
        }
    };
}

regularize_impl!(regularize2, Matrix2, 2.0);
regularize_impl!(regularize3, Matrix3, 3.0);

macro_rules! psd_impl {
    ($name:ident, $mat:ident) => {
        /// Symmetric PSD check: symmetric to round-off and eigenvalues `≥ -rel · tr`.
        pub fn $name<T: Real>(cov: &$mat<T>, rel: T) -> bool {
            if cov.iter().any(|v| !v.is_finite()) {
                return false;
            }
            let scale = cov.norm().max(T::one());
            if (cov - cov.transpose()).norm() > T::lit(1e-9) * scale {
                return false;
            }
            let tr = cov.trace().abs();
            cov.symmetric_eigenvalues().min() >= -rel * tr
        }
    };
}

psd_impl!(is_psd2, Matrix2);
psd_impl!(is_psd3, Matrix3);

/// Whitening factor `W` with `WᵀW = Σ⁻¹` from the Cholesky factor of the
/// regularized inverse: `Σ⁻¹ = L Lᵀ`, `W = Lᵀ`.
pub fn whitening2<T: Real>(cov: &Matrix2<T>) -> Result<Matrix2<T>> {
    let reg = regularize2(cov);
    let inv = reg
        .try_inverse()
        .ok_or(Error::DegenerateGeometry("singular residual covariance"))?;
    let inv = (inv + inv.transpose()) * T::lit(0.5);
    let chol = nalgebra::Cholesky::new(inv)
        .ok_or(Error::DegenerateGeometry("residual covariance not positive definite"))?;
    Ok(chol.l().transpose())
}

/// Inverse of a regularized 2×2 covariance (information matrix).
pub fn information2<T: Real>(cov: &Matrix2<T>) -> Result<Matrix2<T>> {
    regularize2(cov)
        .try_inverse()
        .ok_or(Error::DegenerateGeometry("singular residual covariance"))
}

/// Eigenpairs of a symmetric matrix sorted by ascending eigenvalue.
pub fn sorted_symmetric_eigen<T: Real>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let eig = m.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Eigenpairs of a 3×3 symmetric matrix sorted by descending eigenvalue.
pub fn eigen3_descending<T: Real>(m: &Matrix3<T>) -> ([T; 3], [Vector3<T>; 3]) {
    let eig = m.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals = idx.map(|i| eig.eigenvalues[i]);
    let vecs = idx.map(|i| eig.eigenvectors.column(i).into_owned());
    (vals, vecs)
}

/// Weighted absolute orientation: `(R, t)` minimizing
/// `Σ wᵢ ‖R·srcᵢ + t − dstᵢ‖²` with `det R = +1`.
pub fn weighted_procrustes<T: Real>(
    src: &[Vector3<T>],
    dst: &[Vector3<T>],
    weights: &[T],
) -> Result<(Matrix3<T>, Vector3<T>)> {
    let wsum = weights.iter().fold(T::zero(), |a, &w| a + w);
    if src.len() < 3 || !(wsum > T::zero()) {
        return Err(Error::DegenerateGeometry("absolute orientation needs 3 weighted points"));
    }
    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        mu_s += s * w;
        mu_d += d * w;
    }
    mu_s /= wsum;
    mu_d /= wsum;
    let mut h = Matrix3::zeros();
    for ((s, d), &w) in src.iter().zip(dst).zip(weights) {
        h += (d - mu_d) * (s - mu_s).transpose() * w;
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or(Error::DegenerateGeometry("svd failed"))?;
    let v_t = svd.v_t.ok_or(Error::DegenerateGeometry("svd failed"))?;
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < T::zero() {
        d[(2, 2)] = -T::one();
    }
    let r = u * d * v_t;
    Ok((r, mu_d - r * mu_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use approx::assert_relative_eq;

    #[test]
    fn whitening_identity_on_unit_covariance() {
        let w = whitening2(&Matrix2::<f64>::identity()).unwrap();
        assert_relative_eq!(w, Matrix2::identity(), epsilon = 1e-15);
    }

    #[test]
    fn whitening_inverts_covariance() {
        let cov = Matrix2::new(2.0, 0.7, 0.7, 0.5);
        let w = whitening2(&cov).unwrap();
        assert!((w * cov * w.transpose() - Matrix2::identity()).norm() < 1e-12);
        assert!((w.transpose() * w - cov.try_inverse().unwrap()).norm() < 1e-12);
    }

    #[test]
    fn singular_covariance_is_regularized() {
        let cov = Matrix2::new(1.0, 1.0, 1.0, 1.0);
        let reg = regularize2(&cov);
        assert!(reg.symmetric_eigenvalues().min() > 0.0);
        let w = whitening2(&cov).unwrap();
        assert!((w * reg * w.transpose() - Matrix2::identity()).norm() < 1e-5);
        assert_eq!(regularize2(&Matrix2::<f64>::zeros()), Matrix2::identity());
    }

    #[test]
    fn procrustes_recovers_transform() {
        let r = so3_exp(&Vector3::new(0.3, -1.2, 0.4));
        let t = Vector3::new(0.5, 1.0, -2.0);
        let src: Vec<Vector3<f64>> = (0..6)
            .map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.3, (i as f64).sin()))
            .collect();
        let dst: Vec<_> = src.iter().map(|p| r * p + t).collect();
        let w = vec![1.0, 2.0, 0.5, 1.0, 3.0, 1.0];
        let (re, te) = weighted_procrustes(&src, &dst, &w).unwrap();
        assert_relative_eq!(re, r, epsilon = 1e-12);
        assert_relative_eq!(te, t, epsilon = 1e-12);
    }
}
