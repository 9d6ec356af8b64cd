use axum::extract::rejection::JsonRejection;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use cdr_agent::pipeline::{PipelineError, ResolveError};
use serde::{Deserialize, Serialize};

/// Body of every 4xx/5xx response: `{"error": {"code", "message", "field"?}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    /// Offending variable, for field-level messages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
                field: None,
            },
        }
    }

    fn with_field(mut self, field: &str) -> Self {
        self.body.field = Some(field.to_string());
        self
    }

    pub fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Envelope {
            error: ErrorBody,
        }
        (self.status, Json(Envelope { error: self.body })).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let code = match r.status() {
            StatusCode::UNPROCESSABLE_ENTITY => "invalid_body",
            StatusCode::UNSUPPORTED_MEDIA_TYPE => "unsupported_media_type",
            _ => "malformed_json",
        };
        ApiError::new(r.status(), code, r.body_text())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, code) = match &e {
            PipelineError::EmptyNote => (StatusCode::BAD_REQUEST, "empty_note"),
            PipelineError::InvalidMeta(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_note_meta"),
            PipelineError::InvalidConfig(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_overrides"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<ResolveError> for ApiError {
    fn from(e: ResolveError) -> Self {
        use ResolveError::*;
        let msg = e.to_string();
        let unprocessable = StatusCode::UNPROCESSABLE_ENTITY;
        match &e {
            UnknownSession(id) => ApiError::unknown_session(id),
            NotAwaitingInput(_) => ApiError::new(StatusCode::CONFLICT, "not_awaiting_input", msg),
            CdrNotPending(_) => ApiError::new(StatusCode::CONFLICT, "cdr_not_pending", msg),
            UnknownCdr(_) => ApiError::new(unprocessable, "unknown_cdr", msg),
            NoValues => ApiError::new(unprocessable, "no_values", msg),
            UnknownVariable { variable, .. } => {
                ApiError::new(unprocessable, "unknown_variable", msg).with_field(variable)
            }
            NotPending { variable, .. } => {
                ApiError::new(unprocessable, "not_pending", msg).with_field(variable)
            }
            TypeMismatch { variable, .. } => {
                ApiError::new(unprocessable, "type_mismatch", msg).with_field(variable)
            }
        }
    }
}
