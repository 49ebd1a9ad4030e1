use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite state after dynamics step (entry {index})")]
    NonFiniteState { index: usize },

    #[error("innovation covariance is numerically singular (condition estimate {condition:e})")]
    SingularInnovation { condition: f64 },

    #[error("filter diverged: {reason}")]
    Divergence { reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cost-to-go goal cell ({row}, {col}) is not traversable")]
    GoalBlocked { row: usize, col: usize },

    #[error("cell ({row}, {col}) lies outside the {rows}x{cols} grid")]
    OutOfGrid {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite gradient in batch ({count} entries)")]
    NonFiniteGradient { count: usize },

    #[error("report mismatch: {0}")]
    ReportMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
