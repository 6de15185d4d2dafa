use thiserror::Error;

use rctcast_core::dataset::DatasetError;
use rctcast_core::jsonl::JsonlError;
use rctcast_core::llm::LlmError;
use rctcast_core::metrics::MetricError;
use rctcast_core::predictors::PredictError;
use rctcast_core::stage::StageError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("upstream failure in stage `{stage}` at item `{item}`: {message}")]
    Upstream { stage: String, item: String, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl RunError {
    /// 0 success, 1 config, 2 data, 3 upstream.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Data(_) | RunError::Io { .. } => 2,
            RunError::Upstream { .. } => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        RunError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn upstream(stage: &str, item: &str, e: impl std::fmt::Display) -> Self {
        RunError::Upstream {
            stage: stage.to_string(),
            item: item.to_string(),
            message: e.to_string(),
        }
    }
}

impl From<DatasetError> for RunError {
    fn from(e: DatasetError) -> Self {
        RunError::Data(e.to_string())
    }
}

impl From<JsonlError> for RunError {
    fn from(e: JsonlError) -> Self {
        RunError::Data(e.to_string())
    }
}

impl From<MetricError> for RunError {
    fn from(e: MetricError) -> Self {
        RunError::Data(e.to_string())
    }
}

/// Setup failures of a predictor (before any item) map onto config or data
/// errors.
impl From<PredictError> for RunError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::Exemplars(m) => RunError::Config(m),
            PredictError::Upstream(u) => RunError::upstream("predict", "-", u),
            other => RunError::Data(other.to_string()),
        }
    }
}

impl From<LlmError> for RunError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::NotConfigured | LlmError::Precondition(_) => RunError::Config(e.to_string()),
            other => RunError::upstream("llm", "-", other),
        }
    }
}

pub(crate) fn stage_upstream(stage: &str, item: &str, e: StageError) -> RunError {
    match e {
        StageError::Upstream(LlmError::NotConfigured) => RunError::Config(LlmError::NotConfigured.to_string()),
        other => RunError::upstream(stage, item, other),
    }
}
