//! Uncertainty-aware Perspective-n-Point(-and-Line) pose estimation.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

// `!(a > b)` comparisons are used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dls;
pub mod epnp;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod poly;
pub mod problem;
pub mod refine;
pub mod residuals;
pub mod robust;
pub mod scalar;
pub mod uncertainty;

pub use error::{Error, Result};
pub use geometry::Pose;
pub use problem::{Correspondences, DepthSource, Weighting};
pub use refine::{RefineConfig, RefineRegime};
pub use residuals::{LineObservation, PointObservation, ResidualBlock, SceneDepth};
pub use robust::{PipelineConfig, RansacConfig, SolverChoice};
pub use scalar::Real;

pub type Pose64 = Pose<f64>;
pub type Pose32 = Pose<f32>;
pub type PointObservation64 = PointObservation<f64>;
pub type PointObservation32 = PointObservation<f32>;
pub type LineObservation64 = LineObservation<f64>;
pub type LineObservation32 = LineObservation<f32>;
pub type Correspondences64 = Correspondences<f64>;
pub type Correspondences32 = Correspondences<f32>;
