//! Staged, resumable evaluation runs.
//!
//! Each stage writes its outputs under its own subdirectory and records a
//! hash of its inputs in the manifest. A re-run reuses every stage whose hash
//! and outputs are unchanged; stages that do run replay LLM responses from
//! the response cache.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use rctcast_core::dataset::{
    build_averaged_targets, corpus_stats, filter_single_arm, load_corpus, split_by_rct, stats_markdown, AveragedTargets,
    CorpusEntry, CorpusFormat, CorpusStats, EstimateCorpus, RecordError, Split, SplitAssignment,
};
use rctcast_core::jsonl::{read_jsonl, write_jsonl};
use rctcast_core::llm::{ClientStats, HttpTransport, LlmClient, LlmConfig};
use rctcast_core::metrics::{evaluate, report_markdown, EvalConfig, GoldTable, MetricReport, PredictionFailure};
use rctcast_core::predictors::bm25::{build_bm25_index, Bm25Item, Bm25Params, RetrievalPredictor};
use rctcast_core::predictors::forecast::{ForecastOptions, PromptedPredictor, StatsBlock};
use rctcast_core::predictors::{fit_mean_effect, ExternalRegressor, MeanEffectPredictor, PredictError, Predictor, PredictorInput};
use rctcast_core::querygen::{generate_queries, GenerationOptions, QueryWarning};
use rctcast_core::stage::StageError;
use rctcast_core::synthrct::{linearize_fields, linearize_synthrct, synthesize};
use rctcast_core::template::{sha256_hex, FORECAST_REFERENCE, QUERY_GENERATION, SYNTHETIC_RCT};
use rctcast_core::{is_placeholder, Estimate, GeneratedQuery, SyntheticRct};

use crate::config::{IndexText, PipelineMode, PredictorConfig, PredictorKind, RunConfig};
use crate::error::{stage_upstream, RunError};
use crate::manifest::{hash_file, hash_json, now, rel, Manifest, RunStatus, StageRecord};

pub const STAGE_INGEST: &str = "ingest";
pub const STAGE_SPLIT: &str = "split";
pub const STAGE_QUERIES: &str = "generate-queries";
pub const STAGE_SYNTH: &str = "synth-rct";
pub const STAGE_PREDICT: &str = "predict";
pub const STAGE_EVALUATE: &str = "evaluate";

pub const REPORT_JSON: &str = "06_evaluate/report.json";
pub const REPORT_MD: &str = "06_evaluate/report.md";
pub const PREDICTIONS: &str = "05_predict/predictions.jsonl";

/// Sidecar holding the items a predictor could not answer.
pub fn failures_path(preds: &Path) -> PathBuf {
    let name = preds.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".jsonl").unwrap_or(&name);
    preds.with_file_name(format!("{stem}.failures.jsonl"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub query_id: String,
    pub synthetic_rct: SyntheticRct,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub report: MetricReport,
    pub manifest: Manifest,
    pub llm: ClientStats,
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| RunError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| RunError::Data(format!("{}: {e}", path.display())))
}

/// Most frequent sector, ties to the lexicographically smallest.
pub fn majority_sector(corpus: &EstimateCorpus) -> Option<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in corpus.estimates() {
        if let Some(s) = e.sector.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
            *counts.entry(s.to_lowercase()).or_default() += 1;
        }
    }
    let mut best: Option<(String, usize)> = None;
    for (s, n) in counts {
        if best.as_ref().is_none_or(|(_, bn)| n > *bn) {
            best = Some((s, n));
        }
    }
    best.map(|(s, _)| s)
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    previous: Option<Manifest>,
    manifest: Manifest,
    client: Option<Arc<LlmClient>>,
}

struct StageRun {
    name: &'static str,
    hash: String,
    started: Instant,
}

impl<'a> Runner<'a> {
    fn path(&self, rel_path: &str) -> PathBuf {
        self.dir.join(rel_path)
    }

    fn begin(&self, name: &'static str, inputs: Value) -> StageRun {
        tracing::info!(stage = name, "starting");
        StageRun {
            name,
            hash: hash_json(&json!({"stage": name, "inputs": inputs})),
            started: Instant::now(),
        }
    }

    /// True when the previous run finished this stage with the same inputs
    /// and its outputs are still intact.
    fn reusable(&self, st: &StageRun) -> bool {
        let Some(prev) = self.previous.as_ref().and_then(|m| m.stage(st.name)) else {
            return false;
        };
        prev.stage_hash == st.hash
            && prev.outputs.iter().all(|(p, h)| {
                let path = self.dir.join(p);
                path.exists() && hash_file(&path).is_ok_and(|actual| &actual == h)
            })
    }

    fn finish(&mut self, st: StageRun, outputs: &[&str], items: usize, resumed: bool) -> Result<(), RunError> {
        let mut hashes = BTreeMap::new();
        for o in outputs {
            let p = self.path(o);
            hashes.insert(rel(&self.dir, &p), hash_file(&p)?);
        }
        self.manifest.stages.retain(|s| s.name != st.name);
        self.manifest.stages.push(StageRecord {
            name: st.name.to_string(),
            stage_hash: st.hash,
            outputs: hashes,
            items,
            elapsed_ms: st.started.elapsed().as_millis() as u64,
            resumed,
        });
        if let Some(c) = &self.client {
            self.manifest.llm = c.stats();
        }
        self.manifest.save(&self.dir)
    }

    fn client(&self) -> Result<&LlmClient, RunError> {
        self.client
            .as_deref()
            .ok_or_else(|| RunError::Config("this run needs an LLM client".into()))
    }

    fn ingest(&mut self) -> Result<(EstimateCorpus, String), RunError> {
        const CORPUS: &str = "01_ingest/corpus.jsonl";
        const ERRORS: &str = "01_ingest/load_errors.jsonl";
        let format = CorpusFormat::from_path(&self.cfg.corpus);
        let corpus_sha = hash_file(&self.cfg.corpus).map_err(|e| RunError::Data(e.to_string()))?;
        let st = self.begin(STAGE_INGEST, json!({"corpus_sha256": corpus_sha, "format": format}));
        let hash = st.hash.clone();
        if self.reusable(&st) {
            let entries: Vec<CorpusEntry> = read_jsonl(&self.path(CORPUS))?;
            let n = entries.len();
            self.finish(st, &[CORPUS, ERRORS], n, true)?;
            return Ok((
                EstimateCorpus {
                    entries,
                    source_label: self.cfg.corpus.display().to_string(),
                },
                hash,
            ));
        }
        let loaded = load_corpus(&self.cfg.corpus, format)?;
        let corpus = filter_single_arm(&loaded.corpus);
        if corpus.is_empty() {
            return Err(RunError::Data("corpus has no usable single-intervention estimates".into()));
        }
        write_jsonl(&self.path(CORPUS), &corpus.entries)?;
        write_jsonl::<RecordError>(&self.path(ERRORS), &loaded.errors)?;
        self.finish(st, &[CORPUS, ERRORS], corpus.len(), false)?;
        Ok((corpus, hash))
    }

    fn split(&mut self, corpus: &EstimateCorpus, upstream: &str) -> Result<(SplitAssignment, String), RunError> {
        const SPLIT: &str = "02_split/split.json";
        const STATS: &str = "02_split/stats.json";
        const STATS_MD: &str = "02_split/stats.md";
        let sector = match &self.cfg.split.sector {
            Some(s) => s.clone(),
            None => majority_sector(corpus).ok_or_else(|| RunError::Data("no estimate carries a sector".into()))?,
        };
        let st = self.begin(
            STAGE_SPLIT,
            json!({"upstream": upstream, "ratios": self.cfg.split.ratios, "seed": self.cfg.split.seed, "sector": sector}),
        );
        let hash = st.hash.clone();
        if self.reusable(&st) {
            let split: SplitAssignment = read_json(&self.path(SPLIT))?;
            let n = split.assignments.len();
            self.finish(st, &[SPLIT, STATS, STATS_MD], n, true)?;
            return Ok((split, hash));
        }
        let split = split_by_rct(corpus, self.cfg.split.ratios, self.cfg.split.seed, &sector)?;
        let mut stats: BTreeMap<&str, CorpusStats> = BTreeMap::new();
        let mut md = String::new();
        for sp in Split::ALL {
            let members = EstimateCorpus::from_estimates(sp.name(), split.members(corpus, sp).into_iter().cloned().collect());
            let s = corpus_stats(&members, None);
            md.push_str(&format!("## {}\n\n{}\n", sp.name(), stats_markdown(&s)));
            stats.insert(sp.name(), s);
        }
        write_json(&self.path(SPLIT), &split)?;
        write_json(&self.path(STATS), &stats)?;
        write_text(&self.path(STATS_MD), &md)?;
        self.finish(st, &[SPLIT, STATS, STATS_MD], split.assignments.len(), false)?;
        Ok((split, hash))
    }

    /// Estimates whose queries the run needs, in corpus order.
    fn query_scope<'c>(&self, corpus: &'c EstimateCorpus, split: &SplitAssignment) -> Vec<&'c Estimate> {
        let mut wanted: HashSet<Split> = HashSet::new();
        if self.cfg.mode != PipelineMode::GoldRct {
            wanted.insert(self.cfg.eval_split);
        }
        if self.cfg.bm25_indexes_queries() {
            wanted.insert(Split::Train);
            wanted.insert(Split::Val);
        }
        corpus
            .estimates()
            .filter(|e| split.split_of(&e.estimate_id).is_some_and(|s| wanted.contains(&s)))
            .collect()
    }

    async fn queries(
        &mut self,
        corpus: &EstimateCorpus,
        split: &SplitAssignment,
        upstream: &str,
    ) -> Result<(Vec<GeneratedQuery>, String), RunError> {
        const QUERIES: &str = "03_queries/queries.jsonl";
        const WARNINGS: &str = "03_queries/warnings.jsonl";
        const FAILURES: &str = "03_queries/failures.jsonl";
        let scope = self.query_scope(corpus, split);
        let scope_ids: Vec<&str> = scope.iter().map(|e| e.estimate_id.as_str()).collect();

        if let Some(file) = &self.cfg.queries {
            let file_sha = hash_file(file).map_err(|e| RunError::Data(e.to_string()))?;
            let st = self.begin(STAGE_QUERIES, json!({"upstream": upstream, "supplied_sha256": file_sha, "scope": scope_ids}));
            let hash = st.hash.clone();
            let all: Vec<GeneratedQuery> = read_jsonl(file)?;
            let keep: HashSet<&str> = scope_ids.iter().copied().collect();
            let queries: Vec<GeneratedQuery> = all.into_iter().filter(|q| keep.contains(q.estimate_id.as_str())).collect();
            write_jsonl(&self.path(QUERIES), &queries)?;
            let n = queries.len();
            self.finish(st, &[QUERIES], n, false)?;
            return Ok((queries, hash));
        }

        let client_cfg = self.client()?.config().clone();
        let opts = GenerationOptions {
            model_id: self.cfg.model_for(self.cfg.models.query_generation.as_ref(), &client_cfg)?,
            ..GenerationOptions::default()
        };
        let st = self.begin(
            STAGE_QUERIES,
            json!({
                "upstream": upstream,
                "scope": scope_ids,
                "options": opts,
                "template_sha256": sha256_hex(QUERY_GENERATION),
            }),
        );
        let hash = st.hash.clone();
        if self.reusable(&st) {
            let queries: Vec<GeneratedQuery> = read_jsonl(&self.path(QUERIES))?;
            let n = queries.len();
            self.finish(st, &[QUERIES, WARNINGS, FAILURES], n, true)?;
            return Ok((queries, hash));
        }
        let client = self.client()?;
        let width = client.config().max_in_flight.max(1);
        let results: Vec<_> = stream::iter(scope.iter().copied())
            .map(|e| {
                let opts = &opts;
                async move { (e, generate_queries(e, client, opts).await) }
            })
            .buffered(width)
            .collect()
            .await;
        let mut queries = Vec::new();
        let mut warnings: Vec<QueryWarning> = Vec::new();
        let mut failures = Vec::new();
        for (e, r) in results {
            match r {
                Ok(g) => {
                    queries.extend(g.queries);
                    warnings.extend(g.warnings);
                }
                Err(StageError::Upstream(u)) => {
                    return Err(stage_upstream(STAGE_QUERIES, &e.estimate_id, StageError::Upstream(u)));
                }
                Err(other) => failures.push(ItemFailure {
                    item_id: e.estimate_id.clone(),
                    message: other.to_string(),
                    raw: other.raw_payload().map(str::to_string),
                }),
            }
        }
        write_jsonl(&self.path(QUERIES), &queries)?;
        write_jsonl(&self.path(WARNINGS), &warnings)?;
        write_jsonl(&self.path(FAILURES), &failures)?;
        let n = queries.len();
        self.finish(st, &[QUERIES, WARNINGS, FAILURES], n, false)?;
        Ok((queries, hash))
    }

    fn eval_queries<'q>(&self, queries: &'q [GeneratedQuery], eval_ids: &HashSet<&str>) -> Vec<&'q GeneratedQuery> {
        queries
            .iter()
            .filter(|q| eval_ids.contains(q.estimate_id.as_str()) && self.cfg.levels.contains(&q.level))
            .collect()
    }

    async fn synth(
        &mut self,
        eval_queries: &[&GeneratedQuery],
        upstream: &str,
    ) -> Result<(Vec<SynthRecord>, Vec<ItemFailure>, String), RunError> {
        const SYNTH: &str = "04_synth/synth.jsonl";
        const FAILURES: &str = "04_synth/failures.jsonl";
        let client_cfg = self.client()?.config().clone();
        let opts = GenerationOptions {
            model_id: self.cfg.model_for(self.cfg.models.synthetic_rct.as_ref(), &client_cfg)?,
            ..GenerationOptions::default()
        };
        let ids: Vec<&str> = eval_queries.iter().map(|q| q.query_id.as_str()).collect();
        let st = self.begin(
            STAGE_SYNTH,
            json!({"upstream": upstream, "items": ids, "options": opts, "template_sha256": sha256_hex(SYNTHETIC_RCT)}),
        );
        let hash = st.hash.clone();
        if self.reusable(&st) {
            let records: Vec<SynthRecord> = read_jsonl(&self.path(SYNTH))?;
            let failures: Vec<ItemFailure> = read_jsonl(&self.path(FAILURES))?;
            let n = records.len();
            self.finish(st, &[SYNTH, FAILURES], n, true)?;
            return Ok((records, failures, hash));
        }
        let client = self.client()?;
        let width = client.config().max_in_flight.max(1);
        let results: Vec<_> = stream::iter(eval_queries.iter().copied())
            .map(|q| {
                let opts = &opts;
                async move { (q, synthesize(&q.text, client, opts).await) }
            })
            .buffered(width)
            .collect()
            .await;
        let mut records = Vec::new();
        let mut failures = Vec::new();
        for (q, r) in results {
            match r {
                Ok(s) => records.push(SynthRecord {
                    query_id: q.query_id.clone(),
                    synthetic_rct: s.rct,
                    warnings: s.warnings,
                }),
                Err(StageError::Upstream(u)) => {
                    return Err(stage_upstream(STAGE_SYNTH, &q.query_id, StageError::Upstream(u)));
                }
                Err(other) => failures.push(ItemFailure {
                    item_id: q.query_id.clone(),
                    message: other.to_string(),
                    raw: other.raw_payload().map(str::to_string),
                }),
            }
        }
        write_jsonl(&self.path(SYNTH), &records)?;
        write_jsonl(&self.path(FAILURES), &failures)?;
        let n = records.len();
        self.finish(st, &[SYNTH, FAILURES], n, false)?;
        Ok((records, failures, hash))
    }

    async fn predict(
        &mut self,
        predictor: &dyn Predictor,
        predictor_params: Value,
        inputs: Vec<PredictorInput>,
        mut failures: Vec<PredictionFailure>,
        upstream: &str,
    ) -> Result<(Vec<rctcast_core::EffectPrediction>, Vec<PredictionFailure>, String), RunError> {
        const FAILURES: &str = "05_predict/predictions.failures.jsonl";
        let input_hash = hash_json(&serde_json::to_value(&inputs).expect("inputs serialize"));
        let st = self.begin(
            STAGE_PREDICT,
            json!({
                "upstream": upstream,
                "predictor_id": predictor.id(),
                "params": predictor_params,
                "inputs_sha256": input_hash,
                "pre_failures": failures.len(),
            }),
        );
        let hash = st.hash.clone();
        if self.reusable(&st) {
            let preds = read_jsonl(&self.path(PREDICTIONS))?;
            let failures = read_jsonl(&self.path(FAILURES))?;
            let n = inputs.len();
            self.finish(st, &[PREDICTIONS, FAILURES], n, true)?;
            return Ok((preds, failures, hash));
        }
        let width = self.cfg.llm.max_in_flight.max(1);
        let results: Vec<_> = stream::iter(inputs.iter())
            .map(|input| async move { (input, predictor.predict(input).await) })
            .buffered(width)
            .collect()
            .await;
        let mut preds = Vec::new();
        for (input, r) in results {
            match r {
                Ok(p) => preds.push(p),
                Err(e @ (PredictError::Upstream(_) | PredictError::Contract(_))) => {
                    return Err(RunError::upstream(STAGE_PREDICT, &input.query_id, e));
                }
                Err(e) => failures.push(PredictionFailure {
                    query_id: input.query_id.clone(),
                    predictor_id: predictor.id().to_string(),
                    raw: match &e {
                        PredictError::Failed { raw, .. } => Some(raw.clone()),
                        _ => None,
                    },
                    message: e.to_string(),
                }),
            }
        }
        write_jsonl(&self.path(PREDICTIONS), &preds)?;
        write_jsonl(&self.path(FAILURES), &failures)?;
        let n = inputs.len();
        self.finish(st, &[PREDICTIONS, FAILURES], n, false)?;
        Ok((preds, failures, hash))
    }

    fn evaluate(
        &mut self,
        preds: &[rctcast_core::EffectPrediction],
        failures: &[PredictionFailure],
        golds: GoldTable,
        averaged: Option<&AveragedTargets>,
        upstream: &str,
    ) -> Result<MetricReport, RunError> {
        const AVERAGED: &str = "06_evaluate/averaged_targets.json";
        let eval_cfg = EvalConfig::default();
        let st = self.begin(
            STAGE_EVALUATE,
            json!({"upstream": upstream, "config": eval_cfg, "averaged": averaged.map(|a| hash_json(&serde_json::to_value(a).expect("serializes")))}),
        );
        let mut outputs = vec![REPORT_JSON, REPORT_MD];
        if averaged.is_some() {
            outputs.push(AVERAGED);
        }
        if self.reusable(&st) {
            let report: MetricReport = read_json(&self.path(REPORT_JSON))?;
            let n = report.n_scored;
            self.finish(st, &outputs, n, true)?;
            return Ok(report);
        }
        let report = evaluate(preds, failures, &golds, &eval_cfg)?;
        if let Some(a) = averaged {
            write_json(&self.path(AVERAGED), a)?;
        }
        write_text(&self.path(REPORT_JSON), &format!("{}\n", report.to_json_pretty()))?;
        write_text(&self.path(REPORT_MD), &report_markdown(&self.manifest.run_name, &report))?;
        let n = report.n_scored;
        self.finish(st, &outputs, n, false)?;
        Ok(report)
    }

    async fn execute(&mut self) -> Result<MetricReport, RunError> {
        if self.cfg.mode == PipelineMode::GoldRct {
            let loaded = load_corpus(&self.cfg.corpus, CorpusFormat::from_path(&self.cfg.corpus))?;
            let missing = loaded
                .corpus
                .estimates()
                .find(|e| is_placeholder(&e.intervention_desc) || is_placeholder(&e.outcome_desc))
                .map(|e| e.estimate_id.clone());
            if let Some(id) = missing {
                return Err(RunError::Config(format!(
                    "gold_rct mode needs gold intervention and outcome descriptions; estimate {id} lacks them"
                )));
            }
        }
        let (corpus, h_ingest) = self.ingest()?;
        let (split, h_split) = self.split(&corpus, &h_ingest)?;
        let eval_ids: HashSet<&str> = split
            .members(&corpus, self.cfg.eval_split)
            .into_iter()
            .map(|e| e.estimate_id.as_str())
            .collect();
        if eval_ids.is_empty() {
            return Err(RunError::Data(format!("split `{}` is empty", self.cfg.eval_split.name())));
        }

        let needs_queries = self.cfg.mode != PipelineMode::GoldRct || self.cfg.bm25_indexes_queries();
        let (queries, h_queries) = if needs_queries {
            self.queries(&corpus, &split, &h_split).await?
        } else {
            (Vec::new(), h_split.clone())
        };

        let mut pre_failures = Vec::new();
        let predictor_id = self.cfg.predictor.predictor_id();
        let (inputs, h_inputs): (Vec<PredictorInput>, String) = match self.cfg.mode {
            PipelineMode::EndToEnd => {
                let qs = self.eval_queries(&queries, &eval_ids);
                (
                    qs.iter().map(|q| PredictorInput::new(&q.query_id, &q.text, Some(q.level))).collect(),
                    h_queries.clone(),
                )
            }
            PipelineMode::SyntheticRct => {
                let qs = self.eval_queries(&queries, &eval_ids);
                let (records, synth_failures, h) = self.synth(&qs, &h_queries).await?;
                let levels: HashMap<&str, u8> = qs.iter().map(|q| (q.query_id.as_str(), q.level)).collect();
                for f in synth_failures {
                    pre_failures.push(PredictionFailure {
                        query_id: f.item_id,
                        predictor_id: predictor_id.clone(),
                        message: format!("synthetic RCT stage failed: {}", f.message),
                        raw: f.raw,
                    });
                }
                let mut inputs = Vec::new();
                for r in &records {
                    match linearize_synthrct(&r.synthetic_rct) {
                        Ok(text) => inputs.push(PredictorInput::new(&r.query_id, text, levels.get(r.query_id.as_str()).copied())),
                        Err(e) => pre_failures.push(PredictionFailure {
                            query_id: r.query_id.clone(),
                            predictor_id: predictor_id.clone(),
                            message: e.to_string(),
                            raw: None,
                        }),
                    }
                }
                (inputs, h)
            }
            PipelineMode::GoldRct => (
                corpus
                    .estimates()
                    .filter(|e| eval_ids.contains(e.estimate_id.as_str()))
                    .map(|e| {
                        PredictorInput::new(
                            &e.estimate_id,
                            linearize_fields(Some(&e.intervention_desc), Some(&e.outcome_desc)),
                            None,
                        )
                    })
                    .collect(),
                h_queries.clone(),
            ),
        };
        if inputs.is_empty() && pre_failures.is_empty() {
            return Err(RunError::Data("no items to predict for the configured split and levels".into()));
        }

        let fit: Vec<Estimate> = split.members(&corpus, Split::Train).into_iter().cloned().collect();
        let index: Vec<Estimate> = corpus
            .estimates()
            .filter(|e| matches!(split.split_of(&e.estimate_id), Some(Split::Train | Split::Val)))
            .cloned()
            .collect();
        let forecast_model = self.cfg.models.forecast.clone();
        let (predictor, params) = build_predictor(
            &self.cfg.predictor,
            &fit,
            &index,
            &queries,
            self.client.clone(),
            forecast_model,
            &self.cfg.llm_config(),
        )?;
        let (preds, failures, h_predict) = self
            .predict(predictor.as_ref(), params, inputs, pre_failures, &format!("{h_inputs}:{h_split}"))
            .await?;

        let (golds, averaged) = if self.cfg.averaged_targets {
            let level3: Vec<GeneratedQuery> = self.eval_queries(&queries, &eval_ids).into_iter().cloned().collect();
            let targets = build_averaged_targets(&level3, &corpus);
            (GoldTable::from_averaged(&targets), Some(targets))
        } else {
            let eval: Vec<&Estimate> = split.members(&corpus, self.cfg.eval_split);
            (GoldTable::from_estimates(eval), None)
        };
        self.evaluate(&preds, &failures, golds, averaged.as_ref(), &h_predict)
    }
}

/// Builds the configured predictor. `fit` trains the mean-effect baseline
/// and the training statistics; `index` (with `index_queries` when queries
/// are indexed) feeds the retrieval predictor.
pub fn build_predictor(
    spec: &PredictorConfig,
    fit: &[Estimate],
    index: &[Estimate],
    index_queries: &[GeneratedQuery],
    client: Option<Arc<LlmClient>>,
    forecast_model: Option<String>,
    transport: &LlmConfig,
) -> Result<(Box<dyn Predictor>, Value), RunError> {
    let id = spec.predictor_id();
    match spec.kind {
        PredictorKind::MeanEffect => {
            let model = fit_mean_effect(fit)?;
            let params = json!({"model": model});
            Ok((Box::new(MeanEffectPredictor::new(id, model)), params))
        }
        PredictorKind::Bm25 => {
            let by_id: HashMap<&str, &Estimate> = index.iter().map(|e| (e.estimate_id.as_str(), e)).collect();
            let mut items = Vec::new();
            match spec.index_text {
                IndexText::Query => {
                    for q in index_queries {
                        let Some(e) = by_id.get(q.estimate_id.as_str()) else { continue };
                        if let Some((l, u)) = e.ci() {
                            items.push(Bm25Item {
                                doc_id: q.query_id.clone(),
                                text: q.text.clone(),
                                level: Some(q.level),
                                effect: e.effect_size,
                                ci_lower: l,
                                ci_upper: u,
                            });
                        }
                    }
                }
                IndexText::GoldRct => {
                    for e in index {
                        if let Some((l, u)) = e.ci() {
                            items.push(Bm25Item {
                                doc_id: e.estimate_id.clone(),
                                text: linearize_fields(Some(&e.intervention_desc), Some(&e.outcome_desc)),
                                level: None,
                                effect: e.effect_size,
                                ci_lower: l,
                                ci_upper: u,
                            });
                        }
                    }
                }
            }
            let index = build_bm25_index(items, Bm25Params { k1: spec.k1, b: spec.b })?;
            let params = json!({"k1": spec.k1, "b": spec.b, "index_text": spec.index_text, "documents": index.len()});
            Ok((Box::new(RetrievalPredictor::new(id, index)), params))
        }
        PredictorKind::Prompted => {
            let client = client.ok_or_else(|| RunError::Config("the prompted predictor needs an LLM client".into()))?;
            let stats = match (&spec.stats, spec.training_stats) {
                (Some(s), _) => Some(s.clone()),
                (None, true) => {
                    let t = EstimateCorpus::from_estimates("train", fit.to_vec());
                    Some(StatsBlock::from(&corpus_stats(&t, None)))
                }
                (None, false) => None,
            };
            let model_id = forecast_model
                .or_else(|| client.config().default_model.clone())
                .ok_or_else(|| RunError::Config("no model configured for the prompted predictor".into()))?;
            let options = ForecastOptions {
                model_id,
                temperature: spec.temperature,
                max_output_tokens: spec.max_output_tokens,
                format_retries: spec.format_retries,
                bounds: spec.bounds,
                exemplars: spec.exemplars.clone(),
                stats,
            };
            let params = json!({"options": options, "template_sha256": sha256_hex(FORECAST_REFERENCE)});
            Ok((Box::new(PromptedPredictor::new(id, client, options)?), params))
        }
        PredictorKind::External => {
            let url = spec.url.clone().ok_or_else(|| RunError::Config("missing predictor.url".into()))?;
            let http = HttpTransport::new(
                transport.max_in_flight,
                std::time::Duration::from_secs(transport.timeout_secs),
                transport.retry,
            )?;
            let params = json!({"url": url});
            Ok((Box::new(ExternalRegressor::new(id, url, http)), params))
        }
    }
}

/// Runs (or resumes) the configured pipeline in `cfg.output_dir`.
pub async fn run(cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    let client = if cfg.uses_llm() {
        Some(Arc::new(LlmClient::new(cfg.llm_config())?))
    } else {
        None
    };
    run_with_client(cfg, client).await
}

pub async fn run_with_client(cfg: &RunConfig, client: Option<Arc<LlmClient>>) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    if !cfg.corpus.exists() {
        return Err(RunError::Config(format!("corpus {} does not exist", cfg.corpus.display())));
    }
    if let Some(q) = &cfg.queries {
        if !q.exists() {
            return Err(RunError::Config(format!("queries file {} does not exist", q.display())));
        }
    }
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| RunError::io(&dir, e))?;
    let started = Instant::now();
    let config_value = serde_json::to_value(cfg).expect("config serializes");
    let mut runner = Runner {
        cfg,
        previous: Manifest::load(&dir)?,
        manifest: Manifest::new(cfg.run_name(), config_value),
        dir: dir.clone(),
        client,
    };
    let result = runner.execute().await;
    let llm = runner.client.as_ref().map(|c| c.stats()).unwrap_or_default();
    runner.manifest.llm = llm;
    runner.manifest.finished_at = Some(now());
    runner.manifest.total_elapsed_ms = started.elapsed().as_millis() as u64;
    match result {
        Ok(report) => {
            runner.manifest.status = RunStatus::Complete;
            runner.manifest.save(&dir)?;
            Ok(RunOutcome {
                run_dir: dir,
                report,
                manifest: runner.manifest,
                llm,
            })
        }
        Err(e) => {
            runner.manifest.status = RunStatus::Failed;
            runner.manifest.failure = Some(e.to_string());
            runner.manifest.save(&dir)?;
            Err(e)
        }
    }
}
