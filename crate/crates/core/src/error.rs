use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FraError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("topology mismatch: {0}")]
    Topology(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("non-finite loss at step {step} (diagnostics: {snapshot})")]
    NonFinite { step: u64, snapshot: String },
}

pub type Result<T> = std::result::Result<T, FraError>;

impl FraError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format { path: path.into(), message: message.into() }
    }
}
