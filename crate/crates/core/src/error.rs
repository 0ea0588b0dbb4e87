use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the pipeline.
///
/// Variants are grouped by what went wrong rather than where, so a caller
/// (the CLI in particular) can map them onto exit codes with [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("index state error: {0}")]
    State(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration supplied by the caller.
    Usage,
    /// Malformed, inconsistent or unreadable input data.
    Data,
    /// Invalid state or a failure inside a computation.
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Argument(_) => ErrorKind::Usage,
            Error::Parse { .. } | Error::Schema(_) | Error::Data(_) | Error::Format(_) | Error::Io(_) => {
                ErrorKind::Data
            }
            Error::State(_) | Error::Training(_) | Error::Estimation(_) | Error::Model(_) | Error::Optimizer(_) => {
                ErrorKind::Internal
            }
        }
    }
}
