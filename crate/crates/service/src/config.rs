//! Service configuration and the predictor registry built from it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use rctcast::config::{LlmSection, ModelsConfig, PipelineMode, PredictorConfig, PredictorKind};
use rctcast::pipeline::build_predictor;
use rctcast_core::dataset::{filter_single_arm, load_corpus, CorpusFormat};
use rctcast_core::jsonl::read_jsonl;
use rctcast_core::llm::LlmClient;
use rctcast_core::predictors::Predictor;
use rctcast_core::{Estimate, GeneratedQuery};

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// `synthetic_rct` extracts a synthetic RCT before predicting when the
    /// request carries none; `end_to_end` predicts from the raw query.
    #[serde(default = "default_mode")]
    pub mode: PipelineMode,
    /// Training estimates for the mean-effect and retrieval predictors and
    /// for quoted training statistics.
    #[serde(default)]
    pub train_corpus: Option<PathBuf>,
    /// Generated queries of the training estimates, for query-indexed retrieval.
    #[serde(default)]
    pub train_queries: Option<PathBuf>,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub llm: LlmSection,
    #[serde(default = "default_predictors")]
    pub predictors: Vec<PredictorConfig>,
}

fn default_mode() -> PipelineMode {
    PipelineMode::SyntheticRct
}

fn default_predictors() -> Vec<PredictorConfig> {
    vec![PredictorConfig {
        kind: PredictorKind::Prompted,
        ..PredictorConfig::default()
    }]
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            train_corpus: None,
            train_queries: None,
            models: ModelsConfig::default(),
            llm: LlmSection::default(),
            predictors: default_predictors(),
        }
    }
}

impl ServiceConfig {
    /// Parses TOML; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ServiceError> {
        let mut cfg: ServiceConfig = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        for p in [&mut cfg.train_corpus, &mut cfg.train_queries, &mut cfg.llm.cache_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.mode == PipelineMode::GoldRct {
            return Err(ServiceError::Config("the service runs in end_to_end or synthetic_rct mode".into()));
        }
        if self.predictors.is_empty() {
            return Err(ServiceError::Config("no predictors configured".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.predictors {
            if !seen.insert(p.predictor_id()) {
                return Err(ServiceError::Config(format!("duplicate predictor id `{}`", p.predictor_id())));
            }
        }
        if self.llm.max_in_flight == 0 {
            return Err(ServiceError::Config("`llm.max_in_flight` must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_llm(&self) -> bool {
        self.mode == PipelineMode::SyntheticRct || self.predictors.iter().any(|p| p.kind.uses_llm())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorInfo {
    pub id: String,
    pub kind: String,
}

/// Predictors addressable by id. Shared read-only across requests.
#[derive(Clone, Default)]
pub struct Registry {
    entries: BTreeMap<String, (PredictorInfo, Arc<dyn Predictor>)>,
}

impl Registry {
    pub fn insert(&mut self, kind: impl Into<String>, predictor: Arc<dyn Predictor>) {
        let id = predictor.id().to_string();
        let info = PredictorInfo {
            id: id.clone(),
            kind: kind.into(),
        };
        self.entries.insert(id, (info, predictor));
    }

    pub fn get(&self, id: &str) -> Option<&Arc<dyn Predictor>> {
        self.entries.get(id).map(|(_, p)| p)
    }

    pub fn list(&self) -> Vec<PredictorInfo> {
        self.entries.values().map(|(i, _)| i.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Builds the shared LLM client (when any component needs one) and every
/// configured predictor.
pub fn build_registry(cfg: &ServiceConfig) -> Result<(Registry, Option<Arc<LlmClient>>), ServiceError> {
    let llm = cfg.llm.to_llm_config();
    let client = if cfg.uses_llm() {
        Some(Arc::new(LlmClient::new(llm.clone()).map_err(|e| ServiceError::Config(e.to_string()))?))
    } else {
        None
    };
    let train: Vec<Estimate> = match &cfg.train_corpus {
        Some(path) => {
            let loaded = load_corpus(path, CorpusFormat::from_path(path)).map_err(|e| ServiceError::Config(e.to_string()))?;
            filter_single_arm(&loaded.corpus).estimates().cloned().collect()
        }
        None => Vec::new(),
    };
    let queries: Vec<GeneratedQuery> = match &cfg.train_queries {
        Some(path) => read_jsonl(path).map_err(|e| ServiceError::Config(e.to_string()))?,
        None => Vec::new(),
    };
    let mut registry = Registry::default();
    for spec in &cfg.predictors {
        let (predictor, _) = build_predictor(spec, &train, &train, &queries, client.clone(), cfg.models.forecast.clone(), &llm)
            .map_err(|e| ServiceError::Config(format!("predictor `{}`: {e}", spec.predictor_id())))?;
        registry.insert(spec.kind.name(), Arc::from(predictor));
    }
    Ok((registry, client))
}
