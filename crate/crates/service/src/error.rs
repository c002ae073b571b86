use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use scenestage::Error;

/// Body of every error response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub detail: Value,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                detail: Value::Null,
            },
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.body.detail = detail;
        self
    }

    pub fn not_found(what: &str, id: impl std::fmt::Display) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    /// Rebuilds the response for an error recorded on a job.
    pub fn from_body(body: ErrorBody) -> Self {
        let status = match body.code.as_str() {
            "validation" | "segmentation_failed" | "geometry" => StatusCode::UNPROCESSABLE_ENTITY,
            "not_found" => StatusCode::NOT_FOUND,
            "out_of_bounds" | "capability_mismatch" | "idempotency_conflict" => StatusCode::CONFLICT,
            "backend_error" => StatusCode::BAD_GATEWAY,
            "unauthorized" => StatusCode::UNAUTHORIZED,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError { status, body }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Validation { field, .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", msg)
                .with_detail(serde_json::json!({ "field": field })),
            Error::NotFound { kind, id } => ApiError::not_found(kind, id),
            Error::OutOfBounds { id } => ApiError::new(StatusCode::CONFLICT, "out_of_bounds", msg)
                .with_detail(serde_json::json!({ "box_id": id })),
            Error::SegmentationFailed(_) | Error::EmptyMask => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "segmentation_failed", msg)
            }
            Error::Correspondence(_) | Error::Singular(_) | Error::Projection { .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "geometry", msg)
            }
            Error::Unsupported(_) => ApiError::new(StatusCode::CONFLICT, "capability_mismatch", msg),
            Error::Backend(_) => ApiError::new(StatusCode::BAD_GATEWAY, "backend_error", msg),
            Error::Sampling { .. } | Error::Schedule(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", msg),
            _ => ApiError::internal(msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

/// Parses a JSON body, reporting the path of the first offending field.
pub fn parse_body<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.inner().to_string())
            .with_detail(serde_json::json!({ "field": field }))
    })
}
