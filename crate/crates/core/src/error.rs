use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SagpError> = std::result::Result<T, E>;

/// Coarse classification used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum SagpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("dataset too small: {n} observations, at least {required} required")]
    DatasetTooSmall { n: usize, required: usize },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("fold {fold} is infeasible: {reason}")]
    FoldInfeasible { fold: usize, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("iteration {iteration}: {source}")]
    Sampler {
        iteration: usize,
        #[source]
        source: Box<SagpError>,
    },
}

impl SagpError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SagpError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            SagpError::Config(_) => ErrorKind::Usage,
            SagpError::NotPositiveDefinite { .. } | SagpError::Invariant(_) => ErrorKind::Numerical,
            SagpError::Sampler { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
