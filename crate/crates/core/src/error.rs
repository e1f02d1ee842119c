use std::path::PathBuf;

/// Errors produced by the selection engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate pool: {0}")]
    DegeneratePool(String),

    /// Cholesky breakdown. `pivot` is the index of the first non-positive pivot.
    #[error("numerical domain error at pivot {pivot}: {message}")]
    NumericalDomain { pivot: usize, message: String },

    #[error("budget exhausted: requested {requested} items but only {available} unlabeled")]
    BudgetExhausted { requested: usize, available: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("target accuracy {target} unreachable on curve {curve}")]
    UnreachableTarget { curve: String, target: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
