use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("PLY parse error at byte {offset}: {message}")]
    Ply { offset: usize, message: String },

    #[error("PFM parse error: {0}")]
    Pfm(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("camera file {path}: {message}")]
    CameraFile { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite parameter in Gaussian {index}: {field}")]
    NonFiniteGaussian { index: usize, field: &'static str },

    #[error("point is behind the camera")]
    BehindCamera,

    #[error("undistortion did not converge after {iterations} iterations (residual {residual:e} px)")]
    UndistortDiverged { iterations: usize, residual: f64 },

    #[error("spatial index needs at least one point")]
    EmptyIndex,

    #[error("degenerate pose problem: {0}")]
    Degenerate(String),

    #[error("densification removed every Gaussian; re-initialize the set from the LiDAR cloud or raise sigma")]
    EmptySet,

    #[error("non-finite loss at iteration {iteration} in component {component}")]
    NonFiniteLoss {
        iteration: usize,
        component: &'static str,
    },

    #[error("scene description is empty")]
    EmptyScene,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
