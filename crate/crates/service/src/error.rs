use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),

    /// The request is well formed but not applicable to the current state.
    #[error("{0}")]
    Conflict(String),

    #[error("{0}")]
    Malformed(String),

    #[error(transparent)]
    Core(#[from] coanno_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ServiceError>;

impl ServiceError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ServiceError::Io { path: path.display().to_string(), source }
    }

    /// Engine rejections of an action become conflicts; anything else the
    /// engine reports stays an internal failure.
    pub(crate) fn from_action(e: coanno_core::Error) -> Self {
        match e {
            coanno_core::Error::InvalidAction(m) => ServiceError::Conflict(m),
            coanno_core::Error::UnknownSegment(id) => ServiceError::Conflict(format!("unknown segment id {id}")),
            other => ServiceError::Core(other),
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Malformed(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Core(_) | ServiceError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "invalid_action",
            ServiceError::Malformed(_) => "malformed_body",
            ServiceError::Core(_) | ServiceError::Io { .. } => "internal",
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        let body = ErrorBody { code: self.code(), message: self.to_string() };
        (status, Json(serde_json::json!({ "error": body }))).into_response()
    }
}
