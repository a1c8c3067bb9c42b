use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

/// Errors returned to HTTP clients as `{"error": code, "detail": message}`.
#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("models are still loading")]
    NotReady,
    #[error("malformed request body: {0}")]
    BadRequest(String),
    #[error("expected {expected} vertices, got {got}")]
    VertexCount { expected: usize, got: usize },
    #[error("latent shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("seed must be a non-negative integer below 2^64")]
    Seed,
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("count must lie in 1..={max}, got {got}")]
    Count { max: usize, got: u64 },
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::NotReady => "not_ready",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::VertexCount { .. } => "vertex_count",
            ApiError::Shape(_) => "shape",
            ApiError::NonFinite(_) => "non_finite",
            ApiError::Seed => "seed",
            ApiError::Alpha(_) => "alpha",
            ApiError::Count { .. } => "count",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotReady => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::NonFinite(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let ApiError::Internal(m) = &self {
            log::error!("{m}");
        }
        (self.status(), Json(json!({ "error": self.code(), "detail": self.to_string() }))).into_response()
    }
}
