use thiserror::Error;

/// Failure modes of the geometry, solver and pipeline routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("rotation is at the 180 degree Cayley singularity")]
    Singular180,
    #[error("point depth is zero, cannot project")]
    DepthZero,
    #[error("pyramid level {level} outside 1..={n_levels}")]
    LevelOutOfRange { level: usize, n_levels: usize },
    #[error("degenerate triangulation baseline")]
    DegenerateBaseline,
    #[error("iteration did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("every pose candidate places the scene behind the camera")]
    AllCandidatesBehindCamera,
    #[error("translation is not observable from the residual blocks")]
    TranslationGaugeDegenerate,
    #[error("polynomial solver found no stationary point")]
    NoStationaryPoint,
    #[error("degenerate minimal sample")]
    DegenerateTriple,
    #[error("RANSAC found no model")]
    NoModelFound,
    #[error("not enough correspondences: need {required}, got {actual}")]
    NotEnoughCorrespondences { required: usize, actual: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
