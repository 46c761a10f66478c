use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;

use crate::api::ErrorBody;

#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Conflict { message: String, current_revision: Option<u64> },
    Unprocessable(String),
    Internal(String),
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ApiError::BadRequest(m) | ApiError::NotFound(m) | ApiError::Unprocessable(m) | ApiError::Internal(m) => f.write_str(m),
            ApiError::Conflict { message, .. } => f.write_str(message),
        }
    }
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict { .. } => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Library errors reaching a handler unmapped are server-side failures,
/// except argument errors, which the caller can fix.
impl From<invexnet::Error> for ApiError {
    fn from(e: invexnet::Error) -> Self {
        use invexnet::Error as E;
        match e {
            E::InvalidArgument(_) | E::Dimension { .. } | E::Unsupported(_) | E::Parse { .. } => ApiError::Unprocessable(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let current_revision = match &self {
            ApiError::Conflict { current_revision, .. } => *current_revision,
            _ => None,
        };
        let body = ErrorBody {
            error: self.to_string(),
            current_revision,
        };
        (self.status(), Json(body)).into_response()
    }
}
