use thiserror::Error;

/// Crate-wide error type. Variants distinguish bad user input (configs,
/// datasets, malformed files) from runtime failures (diverged training,
/// corrupt state) so the CLI can map them to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("ingestion error at byte {offset}: {msg}")]
    Ingestion { offset: u64, msg: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("recall error: {0}")]
    Recall(String),

    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("results serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user-provided inputs rather than runtime
    /// failures; drives the CLI exit code (1 vs 2).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Input(_) | Error::Ingestion { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
