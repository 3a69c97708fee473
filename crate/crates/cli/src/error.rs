use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Core(#[from] stremn_core::Error),

    #[error(transparent)]
    Task(#[from] stremn_tasks::Error),
}

impl Error {
    pub fn config_key(key: &str, value: &str, hint: &str) -> Self {
        Error::Config(format!("key '{}': bad value '{}' ({})", key, value, hint))
    }

    /// Category label printed on the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Manifest(_) => "manifest",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
            Error::Core(e) => e.category(),
            Error::Task(e) => e.category(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
