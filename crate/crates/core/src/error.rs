use thiserror::Error;

/// Errors produced anywhere in the captioning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects a scalar, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },

    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },

    #[error("weight-norm direction for output channel {channel} has zero norm")]
    DegenerateDirection { channel: usize },

    #[error("non-finite image feature value at index {index}")]
    InvalidFeature { index: usize },

    #[error("attention is enabled but the spatial feature grid is missing")]
    MissingSpatial,

    #[error("feature file format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("candidate set is empty")]
    EmptyCandidates,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
