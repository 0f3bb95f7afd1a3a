use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numerical precondition failed (zero norm, dimension mismatch, empty input).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("zero-norm vector passed as `{0}`")]
    ZeroNorm(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Invalid configuration value; `field` names the offending setting.
    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },

    /// A trial protocol references data that is not available.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Training diverged or could not start; `history` holds every
    /// validation row recorded before the failure.
    #[error("training failed after {iterations} iterations: {message}")]
    Training {
        iterations: usize,
        message: String,
        history: Vec<crate::neuralnet::HistoryRow>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }
}
