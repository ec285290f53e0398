use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-differentiable point: {0}")]
    NonDifferentiable(String),

    #[error("malformed {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("stage {stage} aborted: {detail}")]
    StageAborted { stage: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration and input-format problems, as opposed to failures that
    /// happen while a run is in progress.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Format { .. } | Error::Json(_)
        )
    }
}
