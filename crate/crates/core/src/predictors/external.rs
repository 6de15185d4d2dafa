//! Client for a supervised regressor served over HTTP. The endpoint takes
//! `{query_id, text}` and answers `{effect, ci_lower, ci_upper}`.

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{PredictError, Predictor, PredictorInput};
use crate::llm::HttpTransport;
use crate::types::EffectPrediction;

#[derive(Debug, Clone)]
pub struct ExternalRegressor {
    id: String,
    url: String,
    bearer: Option<String>,
    transport: HttpTransport,
}

impl ExternalRegressor {
    pub fn new(id: impl Into<String>, url: impl Into<String>, transport: HttpTransport) -> Self {
        Self {
            id: id.into(),
            url: url.into(),
            bearer: None,
            transport,
        }
    }

    pub fn with_bearer(mut self, token: impl Into<String>) -> Self {
        self.bearer = Some(token.into());
        self
    }

    pub fn transport(&self) -> &HttpTransport {
        &self.transport
    }
}

fn field(body: &Value, key: &str) -> Result<f64, PredictError> {
    body.get(key)
        .and_then(Value::as_f64)
        .filter(|v| v.is_finite())
        .ok_or_else(|| PredictError::Contract(format!("`{key}` missing or not a finite number")))
}

/// Reads the response triple. Values are passed through unchanged; only the
/// ordering contract is enforced.
pub fn parse_regressor_body(body: &Value) -> Result<(f64, f64, f64), PredictError> {
    let (e, l, u) = (field(body, "effect")?, field(body, "ci_lower")?, field(body, "ci_upper")?);
    if !(l < e && e < u) {
        return Err(PredictError::Contract(format!("interval ordering violated: {l} < {e} < {u} is false")));
    }
    Ok((e, l, u))
}

#[async_trait]
impl Predictor for ExternalRegressor {
    fn id(&self) -> &str {
        &self.id
    }

    async fn predict(&self, input: &PredictorInput) -> Result<EffectPrediction, PredictError> {
        input.check()?;
        let body = json!({"query_id": input.query_id, "text": input.text});
        let out = self.transport.post_json(&self.url, &body, self.bearer.as_deref()).await?;
        let (effect, ci_lower, ci_upper) = parse_regressor_body(&out.body)?;
        Ok(EffectPrediction {
            query_id: input.query_id.clone(),
            predictor_id: self.id.clone(),
            effect,
            ci_lower,
            ci_upper,
            flags: Vec::new(),
        }
        .ensure_valid()?)
    }
}
