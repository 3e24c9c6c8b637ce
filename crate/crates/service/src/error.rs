use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use collab_core::experiment::ExperimentError;
use collab_core::orchestrator::SessionError;
use collab_core::persistence::PersistenceError;
use collab_core::persona::{CompileError, PersonaFinding};
use serde_json::json;

/// JSON error body: `{"error": code, "message": text, "details": [..]}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Vec<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: Vec::new(),
        }
    }

    pub fn with_details(mut self, details: Vec<String>) -> Self {
        self.details = details;
        self
    }

    pub fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    pub fn invalid(details: Vec<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", details.join("; ")).with_details(details)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, "{}", self.message);
        }
        let body = json!({ "error": self.code, "message": self.message, "details": self.details });
        (self.status, Json(body)).into_response()
    }
}

impl From<CompileError> for ApiError {
    fn from(e: CompileError) -> Self {
        match &e {
            CompileError::Invalid(findings) => {
                let details = findings.iter().map(ToString::to_string).collect();
                if findings
                    .iter()
                    .any(|f| matches!(f, PersonaFinding::StaleTableVersion { .. }))
                {
                    Self::new(StatusCode::CONFLICT, "stale_table_version", e.to_string()).with_details(details)
                } else {
                    Self::invalid(details)
                }
            }
            CompileError::TooLong { .. } => Self::invalid(vec![e.to_string()]),
        }
    }
}

impl From<ExperimentError> for ApiError {
    fn from(e: ExperimentError) -> Self {
        let message = e.to_string();
        match e {
            ExperimentError::NotFound(_) | ExperimentError::NotInPool(_) => Self::not_found(message),
            ExperimentError::Invalid(details) => Self::invalid(details),
            ExperimentError::Status { .. } => Self::new(StatusCode::CONFLICT, "status", message),
            ExperimentError::DuplicateParticipant(_) => Self::conflict(message),
            ExperimentError::DocumentTooLarge { .. } => Self::new(StatusCode::PAYLOAD_TOO_LARGE, "too_large", message),
            ExperimentError::NotText => Self::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "not_text", message),
            ExperimentError::Compile(c) => c.into(),
            ExperimentError::Team(_) | ExperimentError::EmptyGrid | ExperimentError::Simulation(_) => {
                Self::invalid(vec![message])
            }
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        match e {
            SessionError::Config(details) => Self::invalid(details),
            SessionError::Ended(_) => Self::new(StatusCode::CONFLICT, "session_ended", message),
            SessionError::UnknownSpeaker(_)
            | SessionError::ChannelMismatch { .. }
            | SessionError::EmptyMessage
            | SessionError::PromptBudget(_) => Self::invalid(vec![message]),
            SessionError::Persistence(p) => p.into(),
            SessionError::Memory(_) | SessionError::Embed(_) => Self::internal(message),
        }
    }
}

impl From<PersistenceError> for ApiError {
    fn from(e: PersistenceError) -> Self {
        match e {
            PersistenceError::UnknownSession(id) => Self::not_found(format!("unknown session {id}")),
            PersistenceError::SessionEnded(_) => Self::new(StatusCode::CONFLICT, "session_ended", e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}
