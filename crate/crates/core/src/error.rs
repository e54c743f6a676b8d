use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} out of range [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown concept label: {0}")]
    UnknownLabel(String),

    #[error("invalid composition: {0}")]
    InvalidComposition(String),

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("query point too close to the oracle grid boundary: {0:?}")]
    OutsideGrid(Vec<f64>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("schedule mismatch: checkpoint trained with {found}, run configured for {expected}")]
    ScheduleMismatch { found: String, expected: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("classifier held-out accuracy {accuracy:.4} below required {required}")]
    UnderpoweredClassifier { accuracy: f64, required: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
