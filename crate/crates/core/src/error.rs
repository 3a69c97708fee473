use thiserror::Error;

/// Error taxonomy shared across the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes incompatible for an operation; names the offending axes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid or inconsistent configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's contract (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Operation invoked on an object in the wrong state.
    #[error("invalid state: {0}")]
    State(String),

    /// Operation gated behind a flag that is off.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Checkpoint container violation (bad magic, truncated record, ...).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    /// Short category label used by the CLI for error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::State(_) => "state",
            Error::Unsupported(_) => "unsupported",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
