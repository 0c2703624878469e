use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GdsError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token id {id} at position {position} is outside vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("unknown parameter path `{0}`")]
    UnknownPath(String),

    #[error("shape mismatch for `{path}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed container {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<GdsError>,
    },
}

pub type Result<T> = std::result::Result<T, GdsError>;

impl GdsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GdsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GdsError::InvalidInput(msg.into())
    }
}

/// Attach a stage name to errors coming out of a pipeline step.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| GdsError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
