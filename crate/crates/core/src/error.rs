use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("position {position} out of range (max_position = {max_position})")]
    PositionOutOfRange { position: usize, max_position: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cache capacity exceeded: {requested} tokens requested, limit is {limit}")]
    Capacity { requested: usize, limit: usize },

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("duplicate document id `{0}`")]
    DuplicateId(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from user input (bad flags, files, stale stores)
    /// rather than from a bug or an internal invariant violation.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Shape(_) | Error::Json(_))
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
