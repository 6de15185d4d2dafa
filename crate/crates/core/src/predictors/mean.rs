//! Constant predictor: the training set's mean effect and mean CI bounds.

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{PredictError, Predictor, PredictorInput};
use crate::types::{EffectPrediction, Estimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEffectModel {
    pub mean_effect: f64,
    pub mean_ci_lower: f64,
    pub mean_ci_upper: f64,
    pub n_train: usize,
}

/// Componentwise means. CI means are taken over the estimates that carry an
/// interval; at least one must.
pub fn fit_mean_effect(train: &[Estimate]) -> Result<MeanEffectModel, PredictError> {
    if train.is_empty() {
        return Err(PredictError::EmptyTraining);
    }
    let n = train.len() as f64;
    let mean_effect = train.iter().map(|e| e.effect_size).sum::<f64>() / n;
    let cis: Vec<(f64, f64)> = train.iter().filter_map(Estimate::ci).collect();
    if cis.is_empty() {
        return Err(PredictError::InvalidInput("no training estimate carries a CI".into()));
    }
    let m = cis.len() as f64;
    Ok(MeanEffectModel {
        mean_effect,
        mean_ci_lower: cis.iter().map(|c| c.0).sum::<f64>() / m,
        mean_ci_upper: cis.iter().map(|c| c.1).sum::<f64>() / m,
        n_train: train.len(),
    })
}

#[derive(Debug, Clone)]
pub struct MeanEffectPredictor {
    id: String,
    model: MeanEffectModel,
}

impl MeanEffectPredictor {
    pub fn new(id: impl Into<String>, model: MeanEffectModel) -> Self {
        Self { id: id.into(), model }
    }

    pub fn model(&self) -> &MeanEffectModel {
        &self.model
    }
}

#[async_trait]
impl Predictor for MeanEffectPredictor {
    fn id(&self) -> &str {
        &self.id
    }

    async fn predict(&self, input: &PredictorInput) -> Result<EffectPrediction, PredictError> {
        input.check()?;
        Ok(EffectPrediction {
            query_id: input.query_id.clone(),
            predictor_id: self.id.clone(),
            effect: self.model.mean_effect,
            ci_lower: self.model.mean_ci_lower,
            ci_upper: self.model.mean_ci_upper,
            flags: Vec::new(),
        }
        .ensure_valid()?)
    }
}
