//! HTTP facade for interactive forecasting: synthetic-RCT extraction,
//! forecasts (optionally from a user-edited synthetic RCT) and per-session
//! history.
//!
//! No authentication: the service is meant to sit behind a trusted boundary.

pub mod config;
pub mod error;
pub mod history;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use rctcast::config::{ModelsConfig, PipelineMode};
use rctcast_core::llm::LlmClient;
use rctcast_core::predictors::PredictorInput;
use rctcast_core::querygen::GenerationOptions;
use rctcast_core::synthrct::{linearize_synthrct, synthesize};
use rctcast_core::template::sha256_hex;
use rctcast_core::{classify_significance, economically_meaningful, EffectPrediction, SignificanceClass, SyntheticRct, ECONOMIC_THRESHOLD};

pub use config::{build_registry, PredictorInfo, Registry, ServiceConfig};
pub use error::{ApiError, ErrorEnvelope, ServiceError};
pub use history::{HistoryEntry, HistoryStore, DEFAULT_SESSION};

pub struct AppState {
    pub mode: PipelineMode,
    pub registry: Registry,
    pub client: Option<Arc<LlmClient>>,
    pub synth_model: Option<String>,
    pub history: HistoryStore,
}

impl AppState {
    pub fn new(cfg: &ServiceConfig, history: HistoryStore) -> Result<Self, ServiceError> {
        let (registry, client) = build_registry(cfg)?;
        Ok(Self {
            mode: cfg.mode,
            registry,
            client,
            synth_model: synth_model(&cfg.models, cfg.llm.default_model.as_ref()),
            history,
        })
    }
}

fn synth_model(models: &ModelsConfig, default: Option<&String>) -> Option<String> {
    models.synthetic_rct.clone().or_else(|| default.cloned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRctRequest {
    pub query_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRctResponse {
    pub synthetic_rct: SyntheticRct,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastRequest {
    pub query_text: String,
    #[serde(default)]
    pub synthetic_rct: Option<SyntheticRct>,
    pub predictor_id: String,
    #[serde(default)]
    pub session: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub stage: String,
    /// `generated` or `user_edited` for synthetic-RCT steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub input: Value,
    pub output: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub mode: PipelineMode,
    pub steps: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResponse {
    pub prediction: EffectPrediction,
    pub significance_class: SignificanceClass,
    pub economically_meaningful: bool,
    pub pipeline_trace: PipelineTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorsResponse {
    pub mode: PipelineMode,
    pub predictors: Vec<PredictorInfo>,
}

#[derive(Debug, Deserialize)]
pub struct HistoryParams {
    pub session: Option<String>,
}

/// Parses a JSON body after checking the declared content type.
fn json_body<T: DeserializeOwned>(headers: &HeaderMap, body: &Bytes) -> Result<T, ApiError> {
    let ct = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("");
    let mime = ct.split(';').next().unwrap_or("").trim();
    if !mime.eq_ignore_ascii_case("application/json") {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_media_type",
            "request bodies must be application/json",
            json!({"content_type": ct}),
        ));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", format!("malformed JSON body: {e}"), Value::Null))
}

fn session_of(raw: Option<&str>) -> Result<String, ApiError> {
    let s = raw.unwrap_or(DEFAULT_SESSION);
    if history::valid_session(s) {
        Ok(s.to_string())
    } else {
        Err(ApiError::bad_request("session ids use 1 to 64 characters from [A-Za-z0-9_-]"))
    }
}

async fn run_synth(state: &AppState, query: &str) -> Result<rctcast_core::synthrct::Synthesis, ApiError> {
    let client = state
        .client
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::BAD_GATEWAY, "upstream_failure", "no LLM upstream is configured", json!({"stage": "synth-rct", "attempts": null})))?;
    let model = state
        .synth_model
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::BAD_GATEWAY, "upstream_failure", "no model configured for synthetic RCTs", json!({"stage": "synth-rct", "attempts": null})))?;
    let opts = GenerationOptions {
        model_id: model,
        ..GenerationOptions::default()
    };
    synthesize(query, client.as_ref(), &opts).await.map_err(|e| ApiError::from_stage("synth-rct", e))
}

async fn post_synth_rct(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Json<SynthRctResponse>, ApiError> {
    let req: SynthRctRequest = json_body(&headers, &body)?;
    if req.query_text.trim().is_empty() {
        return Err(ApiError::bad_request("query_text is empty"));
    }
    let s = run_synth(&state, &req.query_text).await?;
    Ok(Json(SynthRctResponse {
        synthetic_rct: s.rct,
        warnings: s.warnings,
    }))
}

async fn post_forecast(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Json<ForecastResponse>, ApiError> {
    let req: ForecastRequest = json_body(&headers, &body)?;
    if req.query_text.trim().is_empty() {
        return Err(ApiError::bad_request("query_text is empty"));
    }
    let session = session_of(req.session.as_deref())?;
    let predictor = state.registry.get(&req.predictor_id).ok_or_else(|| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "unknown_predictor",
            format!("predictor `{}` is not registered", req.predictor_id),
            json!({"available": state.registry.list().into_iter().map(|p| p.id).collect::<Vec<_>>()}),
        )
    })?;

    let mut steps = Vec::new();
    let (rct, user_edited) = match req.synthetic_rct.clone() {
        Some(edited) => (Some(edited), true),
        None if state.mode == PipelineMode::SyntheticRct => {
            let s = run_synth(&state, &req.query_text).await?;
            steps.push(TraceStep {
                stage: "synth-rct".into(),
                source: Some("generated".into()),
                input: json!({"query_text": req.query_text}),
                output: json!({"synthetic_rct": s.rct, "warnings": s.warnings}),
            });
            (Some(s.rct), false)
        }
        None => (None, false),
    };
    let text = match &rct {
        Some(r) => {
            let text = linearize_synthrct(r).map_err(|e| {
                if user_edited {
                    ApiError::bad_request(format!("synthetic_rct: {e}"))
                } else {
                    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "prediction_failed", e.to_string(), Value::Null)
                }
            })?;
            steps.push(TraceStep {
                stage: "linearize".into(),
                source: Some(if user_edited { "user_edited" } else { "generated" }.into()),
                input: json!(r),
                output: json!(text),
            });
            text
        }
        None => req.query_text.clone(),
    };

    let input = PredictorInput::new(format!("q-{}", &sha256_hex(&text)[..16]), text, None);
    let prediction = predictor.predict(&input).await.map_err(ApiError::from_predict)?;
    steps.push(TraceStep {
        stage: "predict".into(),
        source: None,
        input: json!({"predictor_id": req.predictor_id, "query_id": input.query_id, "text": input.text}),
        output: json!(prediction),
    });
    let significance_class = classify_significance(prediction.ci_lower, prediction.ci_upper)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "prediction_failed", e.to_string(), Value::Null))?;

    state
        .history
        .append(
            &session,
            HistoryEntry {
                query_text: req.query_text.clone(),
                synthetic_rct: rct,
                user_edited,
                prediction: prediction.clone(),
                timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            },
        )
        .await
        .map_err(|e| ApiError::internal(format!("cannot persist history: {e}")))?;

    Ok(Json(ForecastResponse {
        economically_meaningful: economically_meaningful(prediction.effect, ECONOMIC_THRESHOLD),
        significance_class,
        prediction,
        pipeline_trace: PipelineTrace { mode: state.mode, steps },
    }))
}

async fn get_history(State(state): State<Arc<AppState>>, Query(params): Query<HistoryParams>) -> Result<Json<Vec<HistoryEntry>>, ApiError> {
    let session = session_of(params.session.as_deref())?;
    Ok(Json(state.history.list(&session).await))
}

async fn get_predictors(State(state): State<Arc<AppState>>) -> Json<PredictorsResponse> {
    Json(PredictorsResponse {
        mode: state.mode,
        predictors: state.registry.list(),
    })
}

/// The service routes. With `console_origin`, browsers on that origin (and
/// only that origin) may call the API cross-origin.
pub fn router(state: Arc<AppState>, console_origin: Option<&str>) -> Result<Router, ServiceError> {
    let mut app = Router::new()
        .route("/synth-rct", post(post_synth_rct))
        .route("/forecast", post(post_forecast))
        .route("/history", get(get_history))
        .route("/predictors", get(get_predictors))
        .with_state(state);
    if let Some(origin) = console_origin {
        let origin = HeaderValue::from_str(origin).map_err(|e| ServiceError::Config(format!("console origin: {e}")))?;
        app = app.layer(
            CorsLayer::new()
                // a predicate rather than `exact` so other origins get no CORS headers at all
                .allow_origin(AllowOrigin::predicate(move |o: &HeaderValue, _| *o == origin))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}
