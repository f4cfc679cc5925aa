//! The single mapping from error codes to HTTP statuses.

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dims_core::Error as CoreError;
use dims_federation::FedError;
use serde_json::{json, Value};

/// Every code the API can emit, with its status. Anything that reaches
/// `status_for` but is not listed here is a bug and answers 500.
pub const STATUS_TABLE: &[(&str, u16)] = &[
    // request shape and auth
    ("invalid_request", 400),
    ("unauthorized", 401),
    ("not_found", 404),
    // model
    ("duplicate_slug", 400),
    ("invalid_slug", 400),
    ("not_a_member", 400),
    ("invalid_context", 400),
    ("action_without_assignee", 400),
    ("information_with_assignee", 400),
    ("not_an_action", 400),
    ("already_done", 400),
    ("invalid_range", 400),
    ("illegal_transition", 400),
    ("unknown_workspace", 404),
    ("unknown_module", 404),
    ("unknown_object", 404),
    ("unknown_annotation", 404),
    ("unknown_task", 404),
    // query
    ("empty_query", 400),
    ("unbalanced_parenthesis", 400),
    ("dangling_operator", 400),
    ("empty_group", 400),
    ("unterminated_phrase", 400),
    ("unknown_watch", 404),
    // documents
    ("unknown_document", 404),
    ("unknown_version", 404),
    ("conflict", 409),
    ("not_origin", 400),
    ("wrong_module_kind", 400),
    ("corrupt_content", 500),
    // inbox, ids, config, storage
    ("unknown_inbox_entry", 404),
    ("invalid_node_id", 400),
    ("invalid_object_ref", 400),
    ("invalid_timestamp", 400),
    ("config_not_found", 404),
    ("config_invalid", 400),
    ("journal_corrupt", 500),
    ("internal", 500),
    // federation
    ("empty_selector", 400),
    ("unknown_peer", 404),
    ("peer_unavailable", 503),
    ("request_timeout", 504),
    ("transfer_corrupt", 502),
    ("queue_full", 503),
    // codes a remote node may answer with
    ("malformed", 502),
    ("unsupported", 502),
    ("corrupt", 502),
    ("timeout", 504),
    ("unavailable", 503),
];

pub fn status_for(code: &str) -> Option<StatusCode> {
    STATUS_TABLE
        .iter()
        .find(|(c, _)| *c == code)
        .and_then(|(_, s)| StatusCode::from_u16(*s).ok())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    pub current_version: Option<u64>,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ApiError {
            code: code.to_string(),
            message: message.into(),
            current_version: None,
        }
    }

    pub fn status(&self) -> StatusCode {
        status_for(&self.code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
    }

    pub fn body(&self) -> Value {
        let mut error = json!({"code": self.code, "message": self.message});
        if let Some(v) = self.current_version {
            error["current_version"] = json!(v);
        }
        json!({"ok": false, "error": error})
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let current_version = match &e {
            CoreError::VersionConflict { current_version } => Some(*current_version),
            _ => None,
        };
        ApiError {
            code: e.code().to_string(),
            message: e.to_string(),
            current_version,
        }
    }
}

impl From<FedError> for ApiError {
    fn from(e: FedError) -> Self {
        match e {
            FedError::Store(inner) => inner.into(),
            FedError::Remote { ref code, current_version, .. } => ApiError {
                code: code.clone(),
                message: e.to_string(),
                current_version,
            },
            other => ApiError::new(other.code(), other.to_string()),
        }
    }
}

impl From<dims_core::query::ParseError> for ApiError {
    fn from(e: dims_core::query::ParseError) -> Self {
        CoreError::from(e).into()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new("invalid_request", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::new("invalid_request", e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        ApiError::new("invalid_request", e.body_text())
    }
}
