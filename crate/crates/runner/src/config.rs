//! Declarative run configuration, read from a single TOML document. Relative
//! paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rctcast_core::dataset::{Split, DEFAULT_RATIOS};
use rctcast_core::llm::{LlmConfig, RetryPolicy};
use rctcast_core::predictors::bm25::Bm25Params;
use rctcast_core::predictors::forecast::{default_exemplars, EffectBounds, Exemplar, StatsBlock};

use crate::error::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// The predictor sees the raw query.
    EndToEnd,
    /// The predictor sees the linearized synthetic RCT built from the query.
    SyntheticRct,
    /// The predictor sees the gold intervention and outcome descriptions.
    GoldRct,
}

impl PipelineMode {
    pub fn name(self) -> &'static str {
        match self {
            PipelineMode::EndToEnd => "end_to_end",
            PipelineMode::SyntheticRct => "synthetic_rct",
            PipelineMode::GoldRct => "gold_rct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
    /// In-domain sector; defaults to the corpus's most frequent sector.
    pub sector: Option<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS,
            seed: 0,
            sector: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    MeanEffect,
    Bm25,
    Prompted,
    External,
}

impl PredictorKind {
    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::MeanEffect => "mean_effect",
            PredictorKind::Bm25 => "bm25",
            PredictorKind::Prompted => "prompted",
            PredictorKind::External => "external",
        }
    }

    pub fn uses_llm(self) -> bool {
        self == PredictorKind::Prompted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexText {
    /// Training and validation query text.
    Query,
    /// Linearized gold intervention and outcome descriptions.
    GoldRct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    /// Defaults to the kind's name.
    pub id: Option<String>,
    pub k1: f64,
    pub b: f64,
    pub index_text: IndexText,
    /// Regressor endpoint for `external`.
    pub url: Option<String>,
    pub format_retries: u32,
    pub bounds: EffectBounds,
    pub exemplars: Vec<Exemplar>,
    /// Quote the training split's statistics in the forecast prompt.
    pub training_stats: bool,
    /// Fixed statistics to quote instead of the training split's.
    pub stats: Option<StatsBlock>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        Self {
            kind: PredictorKind::MeanEffect,
            id: None,
            k1: p.k1,
            b: p.b,
            index_text: IndexText::Query,
            url: None,
            format_retries: 1,
            bounds: EffectBounds::default(),
            exemplars: default_exemplars(),
            training_stats: false,
            stats: None,
            temperature: 0.0,
            max_output_tokens: 256,
        }
    }
}

impl PredictorConfig {
    pub fn predictor_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.kind.name().to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub query_generation: Option<String>,
    pub synthetic_rct: Option<String>,
    pub forecast: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    /// Chat endpoint base; falls back to the environment.
    pub base_url: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub default_model: Option<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    /// Response cache; defaults to `.rctcast-cache` next to the config.
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmSection {
    fn default() -> Self {
        let d = LlmConfig::default();
        Self {
            base_url: None,
            api_key_env: None,
            default_model: None,
            max_in_flight: d.max_in_flight,
            timeout_secs: d.timeout_secs,
            retry: d.retry,
            cache_dir: None,
        }
    }
}

impl LlmSection {
    /// Client settings; the key comes from `api_key_env`, then the standard
    /// environment variables fill anything still unset.
    pub fn to_llm_config(&self) -> LlmConfig {
        let api_key = self
            .api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|k| !k.is_empty());
        LlmConfig {
            base_url: self.base_url.clone(),
            api_key,
            default_model: self.default_model.clone(),
            max_in_flight: self.max_in_flight,
            timeout_secs: self.timeout_secs,
            retry: self.retry,
            cache_dir: self.cache_dir.clone(),
        }
        .with_env()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run name used in comparison tables; defaults to the output directory
    /// name.
    #[serde(default)]
    pub name: Option<String>,
    pub corpus: PathBuf,
    /// Pre-generated queries; when absent they are generated.
    #[serde(default)]
    pub queries: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: PipelineMode,
    #[serde(default = "default_levels")]
    pub levels: Vec<u8>,
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
    /// Score level-3 queries against averaged effects of name-matched
    /// estimates.
    #[serde(default)]
    pub averaged_targets: bool,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub llm: LlmSection,
}

fn default_mode() -> PipelineMode {
    PipelineMode::EndToEnd
}

fn default_levels() -> Vec<u8> {
    vec![0]
}

fn default_eval_split() -> Split {
    Split::TestId
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.corpus);
        join(&mut self.output_dir);
        if let Some(q) = self.queries.as_mut() {
            join(q);
        }
        match self.llm.cache_dir.as_mut() {
            Some(c) => join(c),
            None => self.llm.cache_dir = Some(base.join(".rctcast-cache")),
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.levels.is_empty() {
            return bad("`levels` must name at least one level".into());
        }
        if let Some(l) = self.levels.iter().find(|l| **l > 3) {
            return bad(format!("level {l} is outside 0..=3"));
        }
        if self.averaged_targets && self.levels != [3] {
            return bad("averaged-target mode scores level-3 queries only; set `levels = [3]`".into());
        }
        if self.averaged_targets && self.mode == PipelineMode::GoldRct {
            return bad("averaged-target mode needs queries; it cannot run in gold_rct mode".into());
        }
        if self.predictor.kind == PredictorKind::External && self.predictor.url.is_none() {
            return bad("the external predictor needs `predictor.url`".into());
        }
        if self.predictor.kind == PredictorKind::Bm25 && !(self.predictor.k1 >= 0.0 && (0.0..=1.0).contains(&self.predictor.b)) {
            return bad("bm25 needs k1 >= 0 and 0 <= b <= 1".into());
        }
        if self.llm.max_in_flight == 0 {
            return bad("`llm.max_in_flight` must be positive".into());
        }
        Ok(())
    }

    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.output_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into())
        })
    }

    pub fn needs_generated_queries(&self) -> bool {
        self.queries.is_none() && (self.mode != PipelineMode::GoldRct || self.bm25_indexes_queries())
    }

    pub fn bm25_indexes_queries(&self) -> bool {
        self.predictor.kind == PredictorKind::Bm25 && self.predictor.index_text == IndexText::Query
    }

    /// Whether any stage will talk to the chat upstream.
    pub fn uses_llm(&self) -> bool {
        self.needs_generated_queries() || self.mode == PipelineMode::SyntheticRct || self.predictor.kind.uses_llm()
    }

    pub fn llm_config(&self) -> LlmConfig {
        self.llm.to_llm_config()
    }

    /// Model for a stage: the stage's own, then the default.
    pub fn model_for(&self, stage: Option<&String>, llm: &LlmConfig) -> Result<String, RunError> {
        stage
            .cloned()
            .or_else(|| llm.default_model.clone())
            .ok_or_else(|| RunError::Config("no model configured for an LLM stage (set `models.*` or `llm.default_model`)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_defaults() {
        let cfg = RunConfig::from_toml_str("corpus = \"c.jsonl\"\noutput_dir = \"out\"\n", Path::new("/base")).unwrap();
        assert_eq!(cfg.corpus, Path::new("/base/c.jsonl"));
        assert_eq!(cfg.mode, PipelineMode::EndToEnd);
        assert_eq!(cfg.levels, [0]);
        assert_eq!(cfg.predictor.kind, PredictorKind::MeanEffect);
        assert_eq!(cfg.predictor.exemplars.len(), 3);
        assert_eq!(cfg.llm.cache_dir.as_deref(), Some(Path::new("/base/.rctcast-cache")));
        assert_eq!(cfg.run_name(), "out");
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
name = "bm25-l2"
corpus = "c.csv"
output_dir = "/abs/out"
mode = "synthetic_rct"
levels = [2, 3]
eval_split = "test_ood"

[split]
ratios = [0.8, 0.1, 0.1]
seed = 7
sector = "education"

[predictor]
kind = "prompted"
training_stats = true
bounds = { min = -3.0, max = 3.0 }

[models]
forecast = "m-large"

[llm]
base_url = "http://localhost:9"
max_in_flight = 2
retry = { max_retries = 1, initial_backoff_ms = 10, max_backoff_ms = 20 }
"#;
        let cfg = RunConfig::from_toml_str(text, Path::new("/b")).unwrap();
        assert_eq!(cfg.output_dir, Path::new("/abs/out"));
        assert_eq!(cfg.eval_split, Split::TestOod);
        assert_eq!(cfg.predictor.bounds.max, 3.0);
        assert_eq!(cfg.llm.retry.max_retries, 1);
        assert!(cfg.uses_llm());
    }

    #[test]
    fn invalid_configs() {
        for text in [
            "corpus = \"c\"\noutput_dir = \"o\"\nlevels = [4]\n",
            "corpus = \"c\"\noutput_dir = \"o\"\naveraged_targets = true\n",
            "corpus = \"c\"\noutput_dir = \"o\"\n[predictor]\nkind = \"external\"\n",
            "corpus = \"c\"\noutput_dir = \"o\"\nunknown = 1\n",
            "output_dir = \"o\"\n",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text, Path::new(".")), Err(RunError::Config(_))), "{text}");
        }
    }
}
