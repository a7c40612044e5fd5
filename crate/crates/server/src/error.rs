use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use serde::Serialize;

use agentsafe_core::canonical::CanonicalJson;
use agentsafe_core::escalation::EscalationError;
use agentsafe_core::gateway::GatewayError;
use agentsafe_core::ledger::{ApgError, LedgerError};

/// Error body: `{"error": <code>, "message": <text>}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        use StatusCode as S;
        let message = e.to_string();
        let (status, code) = match &e {
            GatewayError::UnknownSession(_) => (S::NOT_FOUND, "unknown-session"),
            GatewayError::SessionClosed(_) => (S::CONFLICT, "session-closed"),
            GatewayError::LadderViolation { .. } => (S::CONFLICT, "ladder-violation"),
            GatewayError::LintFailure(_) => (S::UNPROCESSABLE_ENTITY, "lint-failure"),
            GatewayError::UnknownReference { .. } => (S::NOT_FOUND, "unknown-reference"),
            GatewayError::InvalidRequest(_) => (S::BAD_REQUEST, "invalid-request"),
            GatewayError::Telemetry(_) => (S::BAD_REQUEST, "invalid-event"),
            GatewayError::Escalation(EscalationError::UnknownTicket(_)) => (S::NOT_FOUND, "unknown-ticket"),
            GatewayError::Escalation(EscalationError::AlreadyDecided { .. }) => (S::CONFLICT, "already-decided"),
            GatewayError::Escalation(EscalationError::InvalidModification(_)) => {
                (S::BAD_REQUEST, "invalid-modification")
            }
            GatewayError::Ledger(LedgerError::SealedSession(_)) => (S::CONFLICT, "session-closed"),
            GatewayError::Ledger(_) => (S::INTERNAL_SERVER_ERROR, "ledger"),
            GatewayError::Apg(ApgError::UnknownSession(_)) => (S::NOT_FOUND, "unknown-session"),
            GatewayError::Apg(ApgError::UnsupportedFormat(_)) => (S::BAD_REQUEST, "unsupported-format"),
            GatewayError::Apg(ApgError::UnverifiedLedger(_)) => (S::INTERNAL_SERVER_ERROR, "ledger"),
        };
        Self::new(status, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = CanonicalJson::from_serialize(&ErrorBody {
            error: self.code,
            message: &self.message,
        })
        .map(|c| c.into_string())
        .unwrap_or_default();
        (self.status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
    }
}
