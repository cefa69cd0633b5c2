use crate::group::GroupId;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("group mismatch: {0} vs {1}")]
    GroupMismatch(GroupId, GroupId),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid group element for {group}: {reason}")]
    InvalidElement { group: GroupId, reason: String },

    #[error("log map singular: rotation angle {angle} is within {tolerance} of pi")]
    LogSingularity { angle: f64, tolerance: f64 },

    #[error("{0} has no homogeneous base space to lift from")]
    NotHomogeneous(GroupId),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("batch norm running statistics requested before any training step")]
    BatchNormUninitialised,

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
