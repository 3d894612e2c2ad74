use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("delay {delay} outside the guard interval 0..={guard}")]
    DelayOutOfRange { delay: usize, guard: usize },

    #[error("noise standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("invalid shrinkage parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {stage} at step {index}")]
    NonFinite { stage: String, index: usize },

    #[error("no inactive users to calibrate a threshold on")]
    EmptyInactivePool,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Coarse category, used by the command-line harness to pick an exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_)
            | Error::DelayOutOfRange { .. }
            | Error::InvalidParams(_)
            | Error::Shape(_)
            | Error::InvalidArgument(_) => ErrorCategory::Config,
            Error::Io { .. } | Error::Format { .. } => ErrorCategory::Io,
            Error::NonPositiveSigma(_) | Error::NonFinite { .. } | Error::EmptyInactivePool => {
                ErrorCategory::Numeric
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Numeric,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
