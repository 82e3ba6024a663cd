use std::path::PathBuf;

pub type Result<T, E = StudyError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    /// Out-of-order protocol step, such as round 2 before round 1.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no completed readers")]
    NoCompletedReaders,
    #[error("corrupt {path}: line {line}: {reason}")]
    CorruptLog { path: PathBuf, line: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StudyError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StudyError::Io { path: path.into(), source }
    }
}
