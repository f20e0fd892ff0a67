use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid partition scheme: {0}")]
    Scheme(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("frame count {frames} is not divisible by the downsampling rate {rate}")]
    NotDivisible { frames: usize, rate: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: {message}")]
    Parse { context: String, message: String },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { context: context.into(), message: message.into() }
    }

    /// True for errors caused by user input (bad flags, config, files) rather than
    /// numerical or internal failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } | Error::Scheme(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
