use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("loss node {node} is not a scalar (shape {shape:?})")]
    NonScalarLoss { node: String, shape: Vec<usize> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duration sum mismatch: expected {expected} frames, durations sum to {actual}")]
    DurationMismatch { expected: usize, actual: usize },

    #[error("code {code} at position {position} is outside the codebook of size {size}")]
    CodeOutOfRange {
        position: usize,
        code: u64,
        size: u64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("stream error: {0}")]
    Stream(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
