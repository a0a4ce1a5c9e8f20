use serde_json::Value;
use thiserror::Error;

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),

    /// The item's state forbids the operation, or another request holds it.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid request: {message}")]
    Validation { message: String, detail: Option<Value> },

    #[error("unauthorized")]
    Unauthorized,

    #[error(transparent)]
    Core(#[from] expert_cfg::Error),
}

impl ServiceError {
    pub fn validation(message: impl Into<String>) -> Self {
        ServiceError::Validation {
            message: message.into(),
            detail: None,
        }
    }

    /// Stable machine-readable code for API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation { .. } => "validation",
            ServiceError::Unauthorized => "unauthorized",
            ServiceError::Core(e) if is_caller_error(e) => "validation",
            ServiceError::Core(_) => "internal",
        }
    }
}

fn is_caller_error(e: &expert_cfg::Error) -> bool {
    use expert_cfg::Error::*;
    matches!(
        e,
        Contract(_) | DimensionMismatch { .. } | Config(_) | ZeroEmbedding(_) | NotNormalized { .. }
    )
}
