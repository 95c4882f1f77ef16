use thiserror::Error;

/// Errors surfaced across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("infeasible edit: {0}")]
    InfeasibleEdit(String),

    #[error("token `{0}` is not in the closed vocabulary")]
    OutOfVocabulary(String),

    #[error("emotion `{0}` is not one of the 8 classes {1}")]
    UnknownEmotion(String, String),

    #[error("model `{0}` has not been trained")]
    Untrained(String),

    #[error("missing upstream artifact `{0}`: run `{1}` first")]
    MissingArtifact(String, String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
