use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rank deficient: numerical rank {rank} is below the requested dimension {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("rank deficient in epoch {epoch}: batch predictions have rank {rank}, need {required}")]
    CollapsedPredictions { epoch: usize, rank: usize, required: usize },

    #[error("dimension error: {0}")]
    DimensionError(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("ambient dimension {ambient} is smaller than twice the subspace dimension {dim}")]
    AmbientTooSmall { ambient: usize, dim: usize },

    #[error("argument out of domain: {0}")]
    DomainError(String),

    #[error("degenerate vector: Q-norm {norm:e} is below the threshold")]
    DegenerateVector { norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("camera is inside scene geometry")]
    CameraInsideGeometry,

    #[error("transform is not a rigid motion: {0}")]
    NonRigidTransform(String),

    #[error("prompt class list is empty")]
    EmptyClassList,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("evaluation has no pixels with a non-empty class union")]
    EmptyEvaluation,

    #[error("insufficient pairs: found {found}, need at least {required}")]
    InsufficientPairs { found: usize, required: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than by the inputs on disk.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::CollapsedPredictions { .. }
                | Error::DegenerateVector { .. }
                | Error::NonFinite(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
