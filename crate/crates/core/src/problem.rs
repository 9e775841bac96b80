//! Correspondence sets and the residual covariances the linear solvers use
//! for weighting.

use nalgebra::{Matrix2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::linalg::whitening2;
use crate::residuals::{
    epnp_point_residual_covariance, isotropic_variance, LineObservation, PointObservation,
    SceneDepth,
};
use crate::scalar::Real;

/// Points and lines observed by one calibrated camera.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Correspondences<T: Real> {
    pub points: Vec<PointObservation<T>>,
    pub lines: Vec<LineObservation<T>>,
}

impl<T: Real> Correspondences<T> {
    pub fn new(points: Vec<PointObservation<T>>, lines: Vec<LineObservation<T>>) -> Self {
        Self { points, lines }
    }

    pub fn points_only(points: Vec<PointObservation<T>>) -> Self {
        Self::new(points, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.points.len() + self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops the lines.
    pub fn without_lines(&self) -> Self {
        Self::points_only(self.points.clone())
    }

    /// Keeps features whose mask entry is set; the mask lists points first,
    /// then lines.
    pub fn select(&self, mask: &[bool]) -> Self {
        let np = self.points.len();
        Self {
            points: self
                .points
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(p, _)| *p)
                .collect(),
            lines: self
                .lines
                .iter()
                .zip(&mask[np.min(mask.len())..])
                .filter(|(_, &m)| m)
                .map(|(l, _)| *l)
                .collect(),
        }
    }

    /// Validates every observation; errors name the offending feature.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::InvalidInput(format!("points[{i}]: {e}")))?;
        }
        for (i, l) in self.lines.iter().enumerate() {
            l.validate()
                .map_err(|e| Error::InvalidInput(format!("lines[{i}]: {e}")))?;
        }
        Ok(())
    }

    /// World-frame feature points: point positions, then both endpoints of
    /// every line.
    pub fn world_features(&self) -> Vec<Vector3<T>> {
        let mut out: Vec<_> = self.points.iter().map(|p| p.x).collect();
        for l in &self.lines {
            out.push(l.p);
            out.push(l.q);
        }
        out
    }

    /// Isotropic 3D variances matching [`Self::world_features`].
    pub fn feature_variances(&self) -> Vec<T> {
        let mut out: Vec<_> = self.points.iter().map(|p| isotropic_variance(&p.cov_x)).collect();
        for l in &self.lines {
            out.push(isotropic_variance(&l.cov_p));
            out.push(isotropic_variance(&l.cov_q));
        }
        out
    }

    /// Mean camera-frame depth of all features under `pose`.
    pub fn mean_depth(&self, pose: &Pose<T>) -> T {
        let feats = self.world_features();
        if feats.is_empty() {
            return T::zero();
        }
        let sum = feats.iter().fold(T::zero(), |a, x| a + pose.transform(x).z);
        sum / T::from_usize_lossy(feats.len())
    }
}

/// Where the residual covariances take their depths from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthSource<T: Real> {
    /// Average scene depth shared by all features.
    Scene(SceneDepth<T>),
    /// Rough pose giving per-feature depths.
    Hypothesis(Pose<T>),
}

/// Residual weighting used by the linear solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting<T: Real> {
    /// Unit covariances (the classical solvers).
    Identity,
    /// Isotropic-3D algebraic residual covariances with the given depths.
    Uncertainty(DepthSource<T>),
}

/// Depth floor for features a hypothesis places behind the camera.
fn positive_depth<T: Real>(d: T, fallback: T) -> T {
    if d > T::zero() {
        d
    } else {
        fallback
    }
}

/// Covariances of the algebraic residuals (points first, then lines) under
/// the isotropic 3D approximation; depths come from `source`.
pub fn algebraic_covariances<T: Real>(
    corr: &Correspondences<T>,
    source: &DepthSource<T>,
) -> Result<Vec<Matrix2<T>>> {
    let fallback = match source {
        DepthSource::Scene(d) => d.get(),
        DepthSource::Hypothesis(pose) => {
            let d = corr.mean_depth(pose);
            if d > T::zero() {
                d
            } else {
                return Err(Error::AllCandidatesBehindCamera);
            }
        }
    };
    let depth_of = |x: &Vector3<T>| match source {
        DepthSource::Scene(d) => d.get(),
        DepthSource::Hypothesis(pose) => positive_depth(pose.transform(x).z, fallback),
    };
    let mut out = Vec::with_capacity(corr.len());
    for p in &corr.points {
        let d = SceneDepth::new(depth_of(&p.x))?;
        out.push(epnp_point_residual_covariance(p, isotropic_variance(&p.cov_x), d));
    }
    for l in &corr.lines {
        let (dp, dq) = (depth_of(&l.p), depth_of(&l.q));
        let ll = l.l.norm_squared();
        out.push(Matrix2::new(
            l.sigma_l2 * dp * dp + ll * isotropic_variance(&l.cov_p),
            T::zero(),
            T::zero(),
            l.sigma_l2 * dq * dq + ll * isotropic_variance(&l.cov_q),
        ));
    }
    Ok(out)
}

/// Residual covariances under `weighting` (unit matrices for `Identity`).
pub fn residual_covariances<T: Real>(
    corr: &Correspondences<T>,
    weighting: &Weighting<T>,
) -> Result<Vec<Matrix2<T>>> {
    match weighting {
        Weighting::Identity => Ok(vec![Matrix2::identity(); corr.len()]),
        Weighting::Uncertainty(src) => algebraic_covariances(corr, src),
    }
}

/// Whitening factors for every residual block under `weighting`.
pub fn whitening_factors<T: Real>(
    corr: &Correspondences<T>,
    weighting: &Weighting<T>,
) -> Result<Vec<Matrix2<T>>> {
    match weighting {
        Weighting::Identity => Ok(vec![Matrix2::identity(); corr.len()]),
        Weighting::Uncertainty(src) => algebraic_covariances(corr, src)?
            .iter()
            .map(whitening2)
            .collect(),
    }
}
