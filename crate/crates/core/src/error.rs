use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("OUT_OF_RANGE({field}): {detail}")]
    OutOfRange { field: &'static str, detail: String },

    #[error("EMPTY_REFERENCES: similarity needs at least one reference vector")]
    EmptyReferences,

    #[error("DIMENSION_MISMATCH: expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("EMBEDDING_UNAVAILABLE({0})")]
    EmbeddingUnavailable(String),

    #[error("EMPTY_CANDIDATES at iteration {iteration}")]
    EmptyCandidates { iteration: usize },

    #[error("DEGENERATE_CANDIDATES at iteration {iteration}: all candidates empty and unfinished after retry")]
    DegenerateCandidates { iteration: usize },

    #[error("BACKEND_FAILURE at iteration {iteration}: {source}")]
    Backend {
        iteration: usize,
        #[source]
        source: BackendError,
    },

    #[error("{image_ref}: {source}")]
    Episode {
        image_ref: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn out_of_range(field: &'static str, detail: impl Into<String>) -> Self {
        Error::OutOfRange {
            field,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }

    /// True for errors caused by user input (configuration values or file
    /// contents) rather than by a backend or the runtime.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::OutOfRange { .. } | Error::Parse { .. } | Error::Config(_) => true,
            Error::Episode { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
