use std::path::Path;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] duoformer::Error),

    #[error("invalid experiment spec: {0}")]
    Spec(String),

    #[error("invalid dataset manifest {path}: {reason}")]
    Manifest { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        HarnessError::Json {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn manifest(path: &Path, reason: impl Into<String>) -> Self {
        HarnessError::Manifest {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}
