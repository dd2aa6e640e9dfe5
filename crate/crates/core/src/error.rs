use thiserror::Error;

/// Errors produced by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("undistortion did not converge for pixel ({u}, {v}), residual {residual:e} px")]
    Inversion { u: f64, v: f64, residual: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("image contains no robot pixels: {0}")]
    EmptyImage(String),

    #[error("segmentation failed: {0}")]
    Segmentation(String),

    #[error("disconnected skeleton with component sizes {0:?}")]
    DisconnectedSkeleton(Vec<usize>),

    #[error("right skeleton runs against the left one (orientation mismatch)")]
    OrientationMismatch,

    #[error("only {found} epipolar correspondences found, need at least {required}")]
    InsufficientCorrespondences { found: usize, required: usize },

    #[error("solver failed: {message}")]
    Solver {
        message: String,
        /// Iterations completed before the failure.
        trace: Option<Box<crate::icp::SolveTrace>>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}
