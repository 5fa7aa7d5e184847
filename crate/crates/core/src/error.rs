use thiserror::Error;

/// Errors raised anywhere in the pipeline, from corpus parsing to training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corpus record `{record}`: {reason}")]
    Corpus { record: String, reason: String },

    #[error("cross-entropy target {index} points at a masked logit")]
    MaskedTarget { index: usize },

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
