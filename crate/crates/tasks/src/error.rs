use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("ingestion error at {path}: {detail}")]
    Ingestion { path: PathBuf, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Core(#[from] stremn_core::Error),
}

impl Error {
    pub fn ingest(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Ingestion { path: path.into(), detail: detail.into() }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Ingestion { .. } => "ingestion",
            Error::Io(_) => "io",
            Error::Core(e) => e.category(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
