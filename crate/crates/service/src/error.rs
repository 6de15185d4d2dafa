use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use rctcast_core::llm::LlmError;
use rctcast_core::predictors::PredictError;
use rctcast_core::stage::StageError;

/// Startup failures.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config error: {0}")]
    Config(String),
    #[error("history store {path}: {message}")]
    History { path: String, message: String },
}

/// Wire shape of every error response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub envelope: ErrorEnvelope,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>, detail: Value) -> Self {
        Self {
            status,
            envelope: ErrorEnvelope {
                code: code.to_string(),
                message: message.into(),
                detail,
            },
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message, Value::Null)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message, Value::Null)
    }

    pub fn upstream(stage: &str, e: &LlmError) -> Self {
        let attempts = match e {
            LlmError::RetriesExhausted { attempts, .. } => Some(*attempts),
            LlmError::Permanent { .. } => Some(1),
            _ => None,
        };
        Self::new(
            StatusCode::BAD_GATEWAY,
            "upstream_failure",
            e.to_string(),
            json!({"stage": stage, "attempts": attempts}),
        )
    }

    pub fn from_stage(stage: &str, e: StageError) -> Self {
        match e {
            StageError::Upstream(u) => Self::upstream(stage, &u),
            StageError::Precondition(m) => Self::bad_request(m),
            other => Self::new(
                StatusCode::BAD_GATEWAY,
                "upstream_unparseable",
                other.to_string(),
                json!({"stage": stage, "raw": other.raw_payload()}),
            ),
        }
    }

    pub fn from_predict(e: PredictError) -> Self {
        match e {
            PredictError::Upstream(u) => Self::upstream("predict", &u),
            PredictError::Contract(m) => Self::new(StatusCode::BAD_GATEWAY, "upstream_contract", m, json!({"stage": "predict"})),
            PredictError::InvalidInput(m) => Self::bad_request(m),
            PredictError::Failed { message, raw } => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "prediction_failed",
                message,
                json!({"raw": raw}),
            ),
            other @ PredictError::InvalidPrediction(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "prediction_failed", other.to_string(), Value::Null)
            }
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.envelope)).into_response()
    }
}
