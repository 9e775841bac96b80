//! JSON documents read and written by the commands.

use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uncpnp::geometry::Pose;
use uncpnp::residuals::normalize_line;
use uncpnp::{Correspondences64, LineObservation64, PointObservation64};

use crate::error::{CliError, CliResult};

pub type Mat2 = [[f64; 2]; 2];
pub type Mat3 = [[f64; 3]; 3];

pub fn mat2(m: &Mat2) -> Matrix2<f64> {
    Matrix2::from_fn(|r, c| m[r][c])
}

pub fn mat3(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

pub fn rows3(m: &Matrix3<f64>) -> Mat3 {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

/// Pinhole intrinsics. Observations given in pixels are mapped to
/// normalized image coordinates before solving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> CliResult<()> {
        let ok = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) && self.fx > 0.0 && self.fy > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CliError::Input("intrinsics: focal lengths must be positive and all entries finite".into()))
        }
    }

    pub fn point(&self, u: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy)
    }

    pub fn covariance(&self, c: &Matrix2<f64>) -> Matrix2<f64> {
        let d = Matrix2::from_diagonal(&Vector2::new(1.0 / self.fx, 1.0 / self.fy));
        d * c * d
    }

    /// Maps a pixel line and its distance variance to normalized
    /// coordinates. The returned line has a unit normal.
    pub fn line(&self, l: &Vector3<f64>, sigma_l2: f64) -> uncpnp::Result<(Vector3<f64>, f64)> {
        let l = normalize_line(l)?;
        let ln = Vector3::new(l.x * self.fx, l.y * self.fy, l.x * self.cx + l.y * self.cy + l.z);
        let s = Vector2::new(ln.x, ln.y).norm();
        Ok((normalize_line(&ln)?, sigma_l2 / (s * s)))
    }
}

/// Pose as a row-major rotation and a translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl PoseRecord {
    pub fn to_pose(&self, field: &str) -> CliResult<Pose<f64>> {
        let pose = Pose::new(Matrix3::from_row_slice(&self.r), Vector3::from(self.t));
        if pose.is_valid(1e-6) && self.t.iter().all(|v| v.is_finite()) {
            Ok(pose)
        } else {
            Err(CliError::Input(format!("{field}: r is not a rotation matrix")))
        }
    }
}

impl From<&Pose<f64>> for PoseRecord {
    fn from(p: &Pose<f64>) -> Self {
        Self {
            r: std::array::from_fn(|k| p.rotation[(k / 3, k % 3)]),
            t: p.translation.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRecord {
    pub x: [f64; 3],
    pub cov_x: Mat3,
    pub u: [f64; 2],
    pub cov_u: Mat2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub p: [f64; 3],
    pub q: [f64; 3],
    pub cov_p: Mat3,
    pub cov_q: Mat3,
    /// Image line `l·(u, v, 1) = 0`; need not be normalized.
    pub l: [f64; 3],
    /// Variance of the point-to-line distance.
    pub sigma_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
    #[serde(default)]
    pub points: Vec<PointRecord>,
    #[serde(default)]
    pub lines: Vec<LineRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_hypothesis: Option<PoseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_bar: Option<f64>,
    /// Reported against in the result when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PoseRecord>,
}

impl ProblemFile {
    /// Correspondences in normalized image coordinates, validated.
    pub fn correspondences(&self) -> CliResult<Correspondences64> {
        let k = self.intrinsics;
        if let Some(k) = &k {
            k.validate()?;
        }
        let points = self
            .points
            .iter()
            .map(|p| {
                let (u, cov_u) = (Vector2::from(p.u), mat2(&p.cov_u));
                let (u, cov_u) = match &k {
                    Some(k) => (k.point(&u), k.covariance(&cov_u)),
                    None => (u, cov_u),
                };
                PointObservation64::new(Vector3::from(p.x), mat3(&p.cov_x), u, cov_u)
            })
            .collect();
        let lines = self
            .lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let raw = Vector3::from(l.l);
                let (line, sigma_l2) = match &k {
                    Some(k) => k.line(&raw, l.sigma_l2),
                    None => normalize_line(&raw).map(|n| (n, l.sigma_l2)),
                }
                .map_err(|e| CliError::Input(format!("lines[{i}].l: {e}")))?;
                Ok(LineObservation64 {
                    p: Vector3::from(l.p),
                    q: Vector3::from(l.q),
                    cov_p: mat3(&l.cov_p),
                    cov_q: mat3(&l.cov_q),
                    l: line,
                    sigma_l2,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let corr = Correspondences64::new(points, lines);
        corr.validate().map_err(|e| match e {
            uncpnp::Error::InvalidInput(m) => CliError::Input(m),
            other => CliError::Core(other),
        })?;
        if let Some(d) = self.d_bar {
            if !(d > 0.0 && d.is_finite()) {
                return Err(CliError::Input("d_bar: must be positive".into()));
            }
        }
        Ok(corr)
    }

    pub fn hypothesis(&self) -> CliResult<Option<Pose<f64>>> {
        self.pose_hypothesis.as_ref().map(|p| p.to_pose("pose_hypothesis")).transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveEcho {
    pub refine: String,
    pub tau2: f64,
    pub seed: u64,
    pub starred: bool,
    /// Where the starred solvers took their hypothesis from.
    pub hypothesis: String,
    pub d_bar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlierMask {
    pub points: Vec<bool>,
    pub lines: Vec<bool>,
}

/// Milliseconds per pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timings {
    pub ransac_ms: f64,
    pub solver_ms: f64,
    pub refine_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseError {
    pub e_rot_deg: f64,
    pub e_trans_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub method: String,
    pub config: SolveEcho,
    pub pose: PoseRecord,
    pub ransac_pose: PoseRecord,
    pub inliers: InlierMask,
    pub timings: Timings,
    pub solver_failed_fallback_to_ransac: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_error: Option<PoseError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointViewRecord {
    pub pose: PoseRecord,
    pub u: [f64; 2],
    pub cov_u: Mat2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointTrack {
    pub views: Vec<PointViewRecord>,
}

/// Segment endpoints detected in the reference view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentReference {
    pub pose: PoseRecord,
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub cov_a: Mat2,
    pub cov_b: Mat2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineViewRecord {
    pub pose: PoseRecord,
    pub l: [f64; 3],
    pub sigma_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentTrack {
    pub reference: SegmentReference,
    pub views: Vec<LineViewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrackFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
    #[serde(default)]
    pub points: Vec<PointTrack>,
    #[serde(default)]
    pub segments: Vec<SegmentTrack>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Ok,
    DegenerateBaseline,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointLandmark {
    pub status: TrackStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Mat3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEstimate {
    pub p: [f64; 3],
    pub q: [f64; 3],
    pub cov_p: Mat3,
    pub cov_q: Mat3,
    pub cross_cov: Mat3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentLandmark {
    pub status: TrackStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<SegmentEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LandmarkFile {
    pub points: Vec<PointLandmark>,
    pub segments: Vec<SegmentLandmark>,
}

/// Reads a JSON document; errors carry the path of the offending field.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        format!("{path}: {}", e.into_inner())
    })
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("documents serialize");
    s.push('\n');
    s
}

/// Writes to `path`, or stdout when `None`.
pub fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
