use thiserror::Error;

/// Errors produced by the scene engine.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition. `field` is a dotted path
    /// to the offending value when one can be named.
    #[error("validation error at `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("point is at or behind the camera (z = {depth})")]
    Projection { depth: f64 },

    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },

    #[error("mask is empty")]
    EmptyMask,

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("segmentation failed: {0}")]
    SegmentationFailed(String),

    #[error("correspondence error: {0}")]
    Correspondence(String),

    #[error("singular configuration: {0}")]
    Singular(String),

    #[error("box `{id}` leaves the room bounds")]
    OutOfBounds { id: String },

    #[error("sampling gave up after {tries} tries")]
    Sampling { tries: usize },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
