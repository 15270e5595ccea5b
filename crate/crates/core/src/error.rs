use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI for exit codes and by the HTTP
/// service for status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    NotFound,
    Geometric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input at `{field}`: {reason}")]
    InvalidInput { field: String, reason: String },

    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },

    #[error("point has non-positive depth z = {z}")]
    NonPositiveDepth { z: f64 },

    #[error("rays are degenerate{}: condition number {condition:.3e}", keypoint_suffix(.keypoint))]
    DegenerateRays { keypoint: Option<String>, condition: f64 },

    #[error("no keypoint is observed in at least two frames")]
    NoTriangulableKeypoints,

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("eigen-solver did not converge within {iterations} sweeps")]
    NoConvergence { iterations: usize },

    #[error("pixel ray does not intersect the point cloud")]
    NoIntersection,

    #[error("only {lifted} keypoints could be lifted to 3D, {required} required")]
    TooFewLifted { lifted: usize, required: usize },

    #[error("only {inliers} keypoints passed the consistency threshold, {required} required")]
    TooFewInliers { inliers: usize, required: usize },

    #[error("{got} correspondences given, at least {required} required")]
    InsufficientPoints { got: usize, required: usize },

    #[error("PnP solver failed: best reprojection error {best_error_px:.3} px")]
    SolverFailure { best_error_px: f64 },

    #[error("RANSAC consensus of {inliers} inliers is below the required {required}")]
    ConsensusFailure { inliers: usize, required: usize },

    #[error("every ICP correspondence was rejected by the distance gate")]
    NoMatches,

    #[error("board corners do not define a homography: {0}")]
    DegenerateHomography(String),

    #[error("session `{session}` has no solved object pose")]
    MissingObjectPose { session: String },

    #[error("frame `{frame}` has no camera pose")]
    MissingCameraPose { frame: String },

    #[error("model vertex lies behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("patch {patch} does not fit inside background {background} after scaling")]
    PatchTooLarge { patch: usize, background: usize },

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("cannot parse {}: {message}", .path.display())]
    Parse { path: PathBuf, message: String },
}

fn keypoint_suffix(keypoint: &Option<String>) -> String {
    keypoint.as_ref().map(|k| format!(" for keypoint `{k}`")).unwrap_or_default()
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidInput { field: field.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }

    /// Stable machine-readable variant name.
    pub fn name(&self) -> &'static str {
        match self {
            Error::InvalidInput { .. } => "InvalidInput",
            Error::NotFound { .. } => "NotFound",
            Error::NonPositiveDepth { .. } => "NonPositiveDepth",
            Error::DegenerateRays { .. } => "DegenerateRays",
            Error::NoTriangulableKeypoints => "NoTriangulableKeypoints",
            Error::DegenerateConfiguration(_) => "DegenerateConfiguration",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::NoIntersection => "NoIntersection",
            Error::TooFewLifted { .. } => "TooFewLifted",
            Error::TooFewInliers { .. } => "TooFewInliers",
            Error::InsufficientPoints { .. } => "InsufficientPoints",
            Error::SolverFailure { .. } => "SolverFailure",
            Error::ConsensusFailure { .. } => "ConsensusFailure",
            Error::NoMatches => "NoMatches",
            Error::DegenerateHomography(_) => "DegenerateHomography",
            Error::MissingObjectPose { .. } => "MissingObjectPose",
            Error::MissingCameraPose { .. } => "MissingCameraPose",
            Error::BehindCamera { .. } => "BehindCamera",
            Error::PatchTooLarge { .. } => "PatchTooLarge",
            Error::Io { .. } => "Io",
            Error::Image { .. } => "Image",
            Error::Parse { .. } => "Parse",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidInput { .. } | Error::Parse { .. } => ErrorKind::Validation,
            Error::NotFound { .. } => ErrorKind::NotFound,
            Error::Io { .. } | Error::Image { .. } => ErrorKind::Io,
            _ => ErrorKind::Geometric,
        }
    }
}
