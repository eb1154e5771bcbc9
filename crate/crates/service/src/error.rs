use adaptcat_core::engine::EngineError;
use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};

/// An error rendered as `{"error": {"code", "message", "details"}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn study_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "study_not_found", format!("no study {id}"))
    }

    pub fn session_not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}"))
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid operator token")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn body(&self) -> Value {
        json!({"error": {"code": self.code, "message": self.message, "details": self.details}})
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.status.as_u16(), self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::InvalidConfig(v) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", message)
                .with_details(json!({ "violations": v })),
            EngineError::WrongPhase { expected, actual } => Self::new(StatusCode::CONFLICT, "wrong_phase", message)
                .with_details(json!({"expected": expected, "actual": actual})),
            EngineError::NoOutstandingItem => Self::new(StatusCode::CONFLICT, "no_outstanding_item", message),
            EngineError::StaleItem { expected, got } => Self::new(StatusCode::CONFLICT, "stale_item", message)
                .with_details(json!({"outstanding": expected, "got": got})),
            EngineError::ResponseOutOfRange { .. } => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "response_out_of_range", message)
            }
            EngineError::UnknownItem(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_item", message),
            EngineError::NotFinished => Self::new(StatusCode::CONFLICT, "not_finished", message),
            EngineError::Demographics(errors) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_demographics", message)
                    .with_details(json!({ "fields": errors }))
            }
            EngineError::Estimate(_) => Self::internal(message),
        }
    }
}
