//! Command-line verbs. Each verb maps onto one pipeline stage, plus `run`
//! for the whole staged pipeline and `compare`/`curve` over finished runs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use futures::stream::{self, StreamExt};

use rctcast_core::dataset::{
    build_aidgrade_queries, build_averaged_targets, corpus_stats, filter_single_arm, load_corpus, split_by_rct,
    stats_markdown, AidGradePair, CorpusEntry, CorpusFormat, EstimateCorpus, Split, DEFAULT_RATIOS,
};
use rctcast_core::jsonl::{read_jsonl, write_jsonl};
use rctcast_core::llm::{LlmClient, LlmConfig};
use rctcast_core::metrics::{evaluate, report_markdown, EvalConfig, GoldTable, PredictionFailure};
use rctcast_core::predictors::{PredictError, PredictorInput};
use rctcast_core::querygen::{generate_queries, GenerationOptions};
use rctcast_core::stage::StageError;
use rctcast_core::synthrct::synthesize;
use rctcast_core::{Estimate, GeneratedQuery};

use crate::compare::{build_curves, compare_markdown, curves_csv, load_run};
use crate::config::{PredictorConfig, PredictorKind, RunConfig};
use crate::error::{stage_upstream, RunError};
use crate::pipeline::{build_predictor, failures_path, majority_sector, ItemFailure, SynthRecord};

#[derive(Debug, Parser)]
#[command(name = "rctcast", version, about = "Forecast causal effects of policy interventions from natural-language queries")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a corpus, drop multi-arm records and write canonical JSONL.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also turn aggregate (intervention, outcome, effect) pairs into
        /// level-3 queries and CI-free golds.
        #[arg(long)]
        aidgrade: Option<PathBuf>,
    },
    /// Assign RCT-grouped splits and write per-split statistics.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train, validation and in-domain test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        sector: Option<String>,
    },
    /// Generate four specificity-level queries per estimate.
    GenerateQueries {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Extract a synthetic RCT from each query.
    SynthRct {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Predict effects for inputs with {query_id, text, level} records.
    Predict {
        #[arg(long, value_parser = parse_kind)]
        predictor: PredictorKind,
        #[arg(long)]
        inputs: PathBuf,
        /// Training estimates (fits the baseline, feeds the retrieval index).
        #[arg(long)]
        train: PathBuf,
        /// Queries of the training estimates, indexed by the retrieval predictor.
        #[arg(long)]
        train_queries: Option<PathBuf>,
        /// TOML file with predictor parameters (the `[predictor]` table of a run config).
        #[arg(long)]
        predictor_config: Option<PathBuf>,
        /// Regressor endpoint for the external predictor.
        #[arg(long)]
        url: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Score predictions against gold estimates.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        golds: PathBuf,
        /// Level-3 queries whose targets are averaged over all matching golds.
        #[arg(long)]
        averaged_targets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole configured pipeline, resuming finished stages.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Markdown table comparing finished runs.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metric series over query levels for single-level runs.
    Curve {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct LlmArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long, default_value = ".rctcast-cache")]
    pub cache_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
}

impl LlmArgs {
    fn config(&self) -> LlmConfig {
        LlmConfig {
            base_url: self.base_url.clone(),
            default_model: self.model.clone(),
            max_in_flight: self.max_in_flight,
            cache_dir: Some(self.cache_dir.clone()),
            ..LlmConfig::default()
        }
        .with_env()
    }

    fn client(&self) -> Result<Arc<LlmClient>, RunError> {
        Ok(Arc::new(LlmClient::new(self.config())?))
    }

    fn model(&self, cfg: &LlmConfig) -> Result<String, RunError> {
        cfg.default_model
            .clone()
            .ok_or_else(|| RunError::Config("no model given (use --model or RCTCAST_LLM_MODEL)".into()))
    }
}

fn parse_kind(s: &str) -> Result<PredictorKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown predictor `{s}` (mean_effect, bm25, prompted, external)"))
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| RunError::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), RunError> {
    write_text(path, &format!("{}\n", serde_json::to_string_pretty(v).expect("serializes")))
}

fn read_corpus(path: &Path) -> Result<EstimateCorpus, RunError> {
    let loaded = load_corpus(path, CorpusFormat::from_path(path))?;
    Ok(loaded.corpus)
}

fn read_estimates(path: &Path) -> Result<Vec<Estimate>, RunError> {
    let entries: Vec<CorpusEntry> = read_jsonl(path)?;
    Ok(entries.into_iter().map(|e| e.estimate).collect())
}

fn read_pairs(path: &Path) -> Result<Vec<AidGradePair>, RunError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| RunError::io(path, e))?;
        reader
            .deserialize()
            .collect::<Result<Vec<AidGradePair>, _>>()
            .map_err(|e| RunError::Data(format!("{}: {e}", path.display())))
    } else {
        Ok(read_jsonl(path)?)
    }
}

pub async fn dispatch(command: Command) -> Result<(), RunError> {
    match command {
        Command::Ingest { corpus, out, aidgrade } => {
            let loaded = load_corpus(&corpus, CorpusFormat::from_path(&corpus))?;
            let kept = filter_single_arm(&loaded.corpus);
            write_jsonl(&out.join("corpus.jsonl"), &kept.entries)?;
            write_jsonl(&out.join("load_errors.jsonl"), &loaded.errors)?;
            eprintln!(
                "ingested {} estimates ({} malformed, {} multi-arm dropped)",
                kept.len(),
                loaded.errors.len(),
                loaded.corpus.len() - kept.len()
            );
            if let Some(pairs_path) = aidgrade {
                let pairs = read_pairs(&pairs_path)?;
                let (queries, golds) = build_aidgrade_queries(&pairs)?;
                write_jsonl(&out.join("aidgrade_queries.jsonl"), &queries)?;
                let entries: Vec<CorpusEntry> = golds.into_iter().map(CorpusEntry::from).collect();
                write_jsonl(&out.join("aidgrade_golds.jsonl"), &entries)?;
                eprintln!("built {} aggregate queries", queries.len());
            }
            Ok(())
        }
        Command::Split { corpus, out, seed, ratios, sector } => {
            let corpus = read_corpus(&corpus)?;
            let ratios = match ratios {
                Some(r) => [r[0], r[1], r[2]],
                None => DEFAULT_RATIOS,
            };
            let sector = match sector {
                Some(s) => s,
                None => majority_sector(&corpus).ok_or_else(|| RunError::Data("no estimate carries a sector".into()))?,
            };
            let split = split_by_rct(&corpus, ratios, seed, &sector)?;
            let mut stats = std::collections::BTreeMap::new();
            let mut md = String::new();
            for sp in Split::ALL {
                let members = EstimateCorpus::from_estimates(sp.name(), split.members(&corpus, sp).into_iter().cloned().collect());
                let s = corpus_stats(&members, None);
                md.push_str(&format!("## {}\n\n{}\n", sp.name(), stats_markdown(&s)));
                stats.insert(sp.name(), s);
            }
            write_json(&out.join("split.json"), &split)?;
            write_json(&out.join("stats.json"), &stats)?;
            write_text(&out.join("stats.md"), &md)?;
            Ok(())
        }
        Command::GenerateQueries { corpus, out, llm } => {
            let corpus = read_corpus(&corpus)?;
            let client = llm.client()?;
            let opts = GenerationOptions {
                model_id: llm.model(client.config())?,
                ..GenerationOptions::default()
            };
            let results: Vec<_> = stream::iter(corpus.estimates())
                .map(|e| {
                    let (client, opts) = (&client, &opts);
                    async move { (e, generate_queries(e, client.as_ref(), opts).await) }
                })
                .buffered(llm.max_in_flight.max(1))
                .collect()
                .await;
            let mut queries = Vec::new();
            let mut warnings = Vec::new();
            let mut failures = Vec::new();
            for (e, r) in results {
                match r {
                    Ok(g) => {
                        queries.extend(g.queries);
                        warnings.extend(g.warnings);
                    }
                    Err(StageError::Upstream(u)) => return Err(stage_upstream("generate-queries", &e.estimate_id, StageError::Upstream(u))),
                    Err(other) => failures.push(ItemFailure {
                        item_id: e.estimate_id.clone(),
                        message: other.to_string(),
                        raw: other.raw_payload().map(str::to_string),
                    }),
                }
            }
            write_jsonl(&out, &queries)?;
            write_jsonl(&out.with_extension("warnings.jsonl"), &warnings)?;
            write_jsonl(&failures_path(&out), &failures)?;
            Ok(())
        }
        Command::SynthRct { queries, out, llm } => {
            let queries: Vec<GeneratedQuery> = read_jsonl(&queries)?;
            let client = llm.client()?;
            let opts = GenerationOptions {
                model_id: llm.model(client.config())?,
                ..GenerationOptions::default()
            };
            let results: Vec<_> = stream::iter(queries.iter())
                .map(|q| {
                    let (client, opts) = (&client, &opts);
                    async move { (q, synthesize(&q.text, client.as_ref(), opts).await) }
                })
                .buffered(llm.max_in_flight.max(1))
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
                    Err(StageError::Upstream(u)) => return Err(stage_upstream("synth-rct", &q.query_id, StageError::Upstream(u))),
                    Err(other) => failures.push(ItemFailure {
                        item_id: q.query_id.clone(),
                        message: other.to_string(),
                        raw: other.raw_payload().map(str::to_string),
                    }),
                }
            }
            write_jsonl(&out, &records)?;
            write_jsonl(&failures_path(&out), &failures)?;
            Ok(())
        }
        Command::Predict {
            predictor,
            inputs,
            train,
            train_queries,
            predictor_config,
            url,
            out,
            llm,
        } => {
            let mut spec = match &predictor_config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
                    toml::from_str::<PredictorConfig>(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?
                }
                None => PredictorConfig::default(),
            };
            spec.kind = predictor;
            if url.is_some() {
                spec.url = url;
            }
            let inputs: Vec<PredictorInput> = read_jsonl(&inputs)?;
            let train = read_estimates(&train)?;
            let index_queries: Vec<GeneratedQuery> = match &train_queries {
                Some(p) => read_jsonl(p)?,
                None => Vec::new(),
            };
            let llm_cfg = llm.config();
            let client = if predictor.uses_llm() { Some(llm.client()?) } else { None };
            let (p, _) = build_predictor(&spec, &train, &train, &index_queries, client, llm_cfg.default_model.clone(), &llm_cfg)?;
            let results: Vec<_> = stream::iter(inputs.iter())
                .map(|input| {
                    let p = p.as_ref();
                    async move { (input, p.predict(input).await) }
                })
                .buffered(llm.max_in_flight.max(1))
                .collect()
                .await;
            let mut preds = Vec::new();
            let mut failures = Vec::new();
            for (input, r) in results {
                match r {
                    Ok(pred) => preds.push(pred),
                    Err(e @ (PredictError::Upstream(_) | PredictError::Contract(_))) => {
                        return Err(RunError::upstream("predict", &input.query_id, e));
                    }
                    Err(e) => failures.push(PredictionFailure {
                        query_id: input.query_id.clone(),
                        predictor_id: p.id().to_string(),
                        raw: match &e {
                            PredictError::Failed { raw, .. } => Some(raw.clone()),
                            _ => None,
                        },
                        message: e.to_string(),
                    }),
                }
            }
            write_jsonl(&out, &preds)?;
            write_jsonl(&failures_path(&out), &failures)?;
            Ok(())
        }
        Command::Evaluate {
            preds,
            golds,
            averaged_targets,
            out,
        } => {
            let predictions = read_jsonl(&preds)?;
            let sidecar = failures_path(&preds);
            let failures: Vec<PredictionFailure> = if sidecar.exists() { read_jsonl(&sidecar)? } else { Vec::new() };
            let gold_corpus = EstimateCorpus::from_estimates(golds.display().to_string(), read_estimates(&golds)?);
            let table = match &averaged_targets {
                Some(qpath) => {
                    let queries: Vec<GeneratedQuery> = read_jsonl(qpath)?;
                    let targets = build_averaged_targets(&queries, &gold_corpus);
                    write_json(&out.join("averaged_targets.json"), &targets)?;
                    GoldTable::from_averaged(&targets)
                }
                None => GoldTable::from_estimates(gold_corpus.estimates()),
            };
            let report = evaluate(&predictions, &failures, &table, &EvalConfig::default())?;
            let name = preds.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            write_text(&out.join("report.json"), &format!("{}\n", report.to_json_pretty()))?;
            write_text(&out.join("report.md"), &report_markdown(&name, &report))?;
            print!("{}", report_markdown(&name, &report));
            Ok(())
        }
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = crate::pipeline::run(&cfg).await?;
            print!("{}", report_markdown(&cfg.run_name(), &outcome.report));
            eprintln!(
                "run directory: {} (llm calls: {}, cache hits: {})",
                outcome.run_dir.display(),
                outcome.llm.network_calls,
                outcome.llm.cache_hits
            );
            Ok(())
        }
        Command::Compare { runs, out } => {
            let summaries = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
            let table = compare_markdown(&summaries);
            match out {
                Some(p) => write_text(&p, &table)?,
                None => print!("{table}"),
            }
            Ok(())
        }
        Command::Curve { runs, out } => {
            let summaries = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
            let curves = build_curves(&summaries)?;
            write_json(&out.join("curve.json"), &curves)?;
            write_text(&out.join("curve.csv"), &curves_csv(&curves))?;
            Ok(())
        }
    }
}

/// Parses arguments and runs the verb; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return 2;
        }
    };
    match runtime.block_on(dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
