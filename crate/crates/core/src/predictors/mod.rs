//! The prediction layer: one contract, four implementations, and the
//! three-term squared-error loss used to validate external trainers.

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmError;
use crate::types::{EffectPrediction, Estimate, TypeError};

pub mod bm25;
pub mod external;
pub mod forecast;
pub mod mean;

pub use bm25::{build_bm25_index, retrieval_lookup, Bm25Index, Bm25Item, Bm25Params, RetrievalPredictor};
pub use external::ExternalRegressor;
pub use forecast::{parse_forecast_response, render_forecast_prompt, EffectBounds, Exemplar, PromptedPredictor, StatsBlock};
pub use mean::{fit_mean_effect, MeanEffectModel, MeanEffectPredictor};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty training set")]
    EmptyTraining,
    #[error(transparent)]
    InvalidPrediction(#[from] TypeError),
    #[error(transparent)]
    Upstream(#[from] LlmError),
    /// The model kept answering outside the output contract.
    #[error("prediction failure: {message}")]
    Failed { message: String, raw: String },
    /// A supervised endpoint returned something outside its wire contract.
    #[error("endpoint contract violation: {0}")]
    Contract(String),
    #[error("bad exemplars: {0}")]
    Exemplars(String),
}

/// What a predictor sees: the raw query or a linearized synthetic RCT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorInput {
    pub query_id: String,
    pub text: String,
    #[serde(default)]
    pub level: Option<u8>,
}

impl PredictorInput {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>, level: Option<u8>) -> Self {
        Self {
            query_id: query_id.into(),
            text: text.into(),
            level,
        }
    }

    pub(crate) fn check(&self) -> Result<(), PredictError> {
        if self.text.trim().is_empty() {
            return Err(PredictError::InvalidInput(format!("{}: empty text", self.query_id)));
        }
        if self.level.is_some_and(|l| l > 3) {
            return Err(PredictError::InvalidInput(format!("{}: level out of range", self.query_id)));
        }
        Ok(())
    }
}

#[async_trait]
pub trait Predictor: Send + Sync {
    fn id(&self) -> &str;

    /// Returns a strictly ordered triple or an error, never an invalid triple.
    async fn predict(&self, input: &PredictorInput) -> Result<EffectPrediction, PredictError>;
}

/// `(E - Ê)² + (CL - ĈL)² + (CU - ĈU)²` over (effect, lower, upper) triples.
pub fn mse_loss(pred: (f64, f64, f64), gold: (f64, f64, f64)) -> f64 {
    (gold.0 - pred.0).powi(2) + (gold.1 - pred.1).powi(2) + (gold.2 - pred.2).powi(2)
}

/// Loss against a gold estimate; `None` when the gold carries no interval.
pub fn mse_loss_for(pred: &EffectPrediction, gold: &Estimate) -> Option<f64> {
    let (l, u) = gold.ci()?;
    Some(mse_loss((pred.effect, pred.ci_lower, pred.ci_upper), (gold.effect_size, l, u)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loss_examples() {
        let g = (0.2, 0.1, 0.3);
        assert_eq!(mse_loss(g, g), 0.0);
        assert!((mse_loss((0.0, 0.0, 0.0), g) - 0.14).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn loss_symmetric_and_nonnegative(a in proptest::array::uniform3(-3.0f64..3.0), b in proptest::array::uniform3(-3.0f64..3.0)) {
            let (a, b) = ((a[0], a[1], a[2]), (b[0], b[1], b[2]));
            prop_assert_eq!(mse_loss(a, b), mse_loss(b, a));
            prop_assert!(mse_loss(a, b) >= 0.0);
            prop_assert_eq!(mse_loss(a, b) == 0.0, a == b);
        }
    }
}
