//! Estimate corpora: ingestion, preprocessing filters, leakage-safe splits,
//! corpus statistics and the two out-of-domain evaluation constructions
//! (templated aggregate queries and averaged-effect targets).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::types::{Estimate, GeneratedQuery};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{bad} of {total} records malformed; first errors: {summary}")]
    TooManyMalformed {
        bad: usize,
        total: usize,
        summary: String,
    },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("no estimates belong to in-domain sector `{0}`")]
    NoInDomain(String),
    #[error("rct `{0}` mixes in-domain and out-of-domain sectors")]
    MixedSectorRct(String),
    #[error("duplicate pair ({0}, {1})")]
    DuplicatePair(String, String),
    #[error("empty name in pair {0}")]
    EmptyName(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guesses from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

/// One ingested record: an estimate plus its arm-count annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    #[serde(flatten)]
    pub estimate: Estimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_count: Option<u32>,
}

impl From<Estimate> for CorpusEntry {
    fn from(estimate: Estimate) -> Self {
        Self {
            estimate,
            intervention_count: None,
            outcome_count: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateCorpus {
    pub entries: Vec<CorpusEntry>,
    pub source_label: String,
}

impl EstimateCorpus {
    pub fn from_estimates(source_label: impl Into<String>, estimates: Vec<Estimate>) -> Self {
        Self {
            entries: estimates.into_iter().map(CorpusEntry::from).collect(),
            source_label: source_label.into(),
        }
    }

    pub fn estimates(&self) -> impl Iterator<Item = &Estimate> {
        self.entries.iter().map(|e| &e.estimate)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, estimate_id: &str) -> Option<&Estimate> {
        self.estimates().find(|e| e.estimate_id == estimate_id)
    }

    pub fn index(&self) -> HashMap<&str, &Estimate> {
        self.estimates().map(|e| (e.estimate_id.as_str(), e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub corpus: EstimateCorpus,
    pub errors: Vec<RecordError>,
}

/// Above this share of malformed records ingestion aborts.
pub const MALFORMED_ABORT_FRACTION: f64 = 0.10;
/// Files with fewer records than this never abort; their errors are reported.
pub const MALFORMED_ABORT_MIN_RECORDS: usize = 10;

const INTEGER_COLUMNS: &[&str] = &["sample_size", "intervention_count", "outcome_count"];
const REAL_COLUMNS: &[&str] = &["effect_size", "ci_lower", "ci_upper"];

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LoadOutcome, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let rows = match format {
        CorpusFormat::Jsonl => jsonl_rows(&text),
        CorpusFormat::Csv => csv_rows(&text),
    };
    ingest_rows(label, rows)
}

type Row = (usize, Result<Value, String>);

fn jsonl_rows(text: &str) -> Vec<Row> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, serde_json::from_str::<Value>(l).map_err(|e| e.to_string())))
        .collect()
}

fn csv_rows(text: &str) -> Vec<Row> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return vec![(1, Err(e.to_string()))],
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                rows.push((line, Err(e.to_string())));
                continue;
            }
        };
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut obj = Map::new();
        for (name, field) in headers.iter().zip(record.iter()) {
            let name = name.trim();
            let field = field.trim();
            if field.is_empty() {
                continue;
            }
            let value = if REAL_COLUMNS.contains(&name) {
                field
                    .parse::<f64>()
                    .ok()
                    .and_then(|f| serde_json::Number::from_f64(f).map(Value::Number))
                    .unwrap_or_else(|| Value::String(field.to_string()))
            } else if INTEGER_COLUMNS.contains(&name) {
                field
                    .parse::<u64>()
                    .map(Value::from)
                    .unwrap_or_else(|_| Value::String(field.to_string()))
            } else {
                Value::String(field.to_string())
            };
            obj.insert(name.to_string(), value);
        }
        rows.push((line, Ok(Value::Object(obj))));
    }
    rows
}

fn ingest_rows(label: String, rows: Vec<Row>) -> Result<LoadOutcome, DatasetError> {
    let total = rows.len();
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (line, row) in rows {
        let parsed = row.and_then(|v| serde_json::from_value::<CorpusEntry>(v).map_err(|e| e.to_string()));
        let entry = match parsed {
            Ok(e) => e,
            Err(message) => {
                errors.push(RecordError { line, message });
                continue;
            }
        };
        let report = entry.estimate.validate();
        if !report.is_valid() {
            errors.push(RecordError {
                line,
                message: report.to_string(),
            });
            continue;
        }
        if !seen.insert(entry.estimate.estimate_id.clone()) {
            errors.push(RecordError {
                line,
                message: format!("duplicate estimate_id `{}`", entry.estimate.estimate_id),
            });
            continue;
        }
        entries.push(entry);
    }
    let bad = errors.len();
    if total >= MALFORMED_ABORT_MIN_RECORDS && (bad as f64) > MALFORMED_ABORT_FRACTION * total as f64 {
        let summary = errors
            .iter()
            .take(3)
            .map(|e| format!("line {}: {}", e.line, e.message))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(DatasetError::TooManyMalformed { bad, total, summary });
    }
    Ok(LoadOutcome {
        corpus: EstimateCorpus {
            entries,
            source_label: label,
        },
        errors,
    })
}

/// Keeps estimates with exactly one intervention and one outcome; absent
/// counts mean one.
pub fn filter_single_arm(corpus: &EstimateCorpus) -> EstimateCorpus {
    EstimateCorpus {
        entries: corpus
            .entries
            .iter()
            .filter(|e| e.intervention_count.unwrap_or(1) == 1 && e.outcome_count.unwrap_or(1) == 1)
            .cloned()
            .collect(),
        source_label: corpus.source_label.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestId, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

/// Default in-domain proportions (train, val, test).
pub const DEFAULT_RATIOS: [f64; 3] = [0.76, 0.09, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub in_domain_sector: String,
    pub assignments: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, estimate_id: &str) -> Option<Split> {
        self.assignments.get(estimate_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignments.values().filter(|s| **s == split).count()
    }

    pub fn members<'a>(&'a self, corpus: &'a EstimateCorpus, split: Split) -> Vec<&'a Estimate> {
        corpus
            .estimates()
            .filter(|e| self.split_of(&e.estimate_id) == Some(split))
            .collect()
    }
}

fn sector_matches(sector: Option<&str>, in_domain: &str) -> bool {
    sector.is_some_and(|s| s.trim().eq_ignore_ascii_case(in_domain.trim()))
}

/// Group-atomic split. Out-of-domain estimates go wholesale to `test_ood`;
/// in-domain RCT groups are shuffled by `seed`, ordered largest first, and
/// each is placed in the split furthest below its estimate-level target.
pub fn split_by_rct(
    corpus: &EstimateCorpus,
    ratios: [f64; 3],
    seed: u64,
    in_domain_sector: &str,
) -> Result<SplitAssignment, DatasetError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios));
    }

    let mut group_order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, (Vec<&str>, bool)> = HashMap::new();
    for e in corpus.estimates() {
        let in_domain = sector_matches(e.sector.as_deref(), in_domain_sector);
        let slot = groups.entry(e.rct_id.as_str()).or_insert_with(|| {
            group_order.push(e.rct_id.as_str());
            (Vec::new(), in_domain)
        });
        if slot.1 != in_domain {
            return Err(DatasetError::MixedSectorRct(e.rct_id.clone()));
        }
        slot.0.push(e.estimate_id.as_str());
    }

    let mut assignments = BTreeMap::new();
    let mut in_domain_groups: Vec<&Vec<&str>> = Vec::new();
    for rct in &group_order {
        let (members, in_domain) = &groups[rct];
        if *in_domain {
            in_domain_groups.push(members);
        } else {
            for id in members {
                assignments.insert(id.to_string(), Split::TestOod);
            }
        }
    }
    if in_domain_groups.is_empty() {
        return Err(DatasetError::NoInDomain(in_domain_sector.to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    in_domain_groups.shuffle(&mut rng);
    in_domain_groups.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let n_in: usize = in_domain_groups.iter().map(|g| g.len()).sum();
    let targets: Vec<f64> = ratios.iter().map(|r| r * n_in as f64).collect();
    let mut filled = [0usize; 3];
    let splits = [Split::Train, Split::Val, Split::TestId];
    for group in in_domain_groups {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for k in 0..3 {
            let deficit = targets[k] - filled[k] as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = k;
            }
        }
        filled[best] += group.len();
        for id in group {
            assignments.insert(id.to_string(), splits[best]);
        }
    }

    Ok(SplitAssignment {
        seed,
        ratios,
        in_domain_sector: in_domain_sector.to_string(),
        assignments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_estimates: usize,
    pub n_queries_per_level: [usize; 4],
    pub mean_effect: f64,
    /// Population variance (divides by N).
    pub variance_effect: f64,
    pub std_effect: f64,
    pub median_sample_size: Option<u64>,
    /// Mean character count (spaces included) of query text per level.
    pub avg_query_chars_per_level: [Option<f64>; 4],
    pub is_empty: bool,
    pub variance_convention: String,
}

pub fn corpus_stats(corpus: &EstimateCorpus, queries: Option<&[GeneratedQuery]>) -> CorpusStats {
    let effects: Vec<f64> = corpus.estimates().map(|e| e.effect_size).collect();
    let n = effects.len();
    let (mean, variance) = if n == 0 {
        (0.0, 0.0)
    } else {
        let mean = effects.iter().sum::<f64>() / n as f64;
        let var = effects.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var)
    };

    let mut sizes: Vec<u64> = corpus.estimates().filter_map(|e| e.sample_size).collect();
    sizes.sort_unstable();
    let median_sample_size = match sizes.len() {
        0 => None,
        m if m % 2 == 1 => Some(sizes[m / 2]),
        m => Some((sizes[m / 2 - 1] + sizes[m / 2]) / 2),
    };

    let mut counts = [0usize; 4];
    let mut chars = [0usize; 4];
    if let Some(qs) = queries {
        for q in qs.iter().filter(|q| q.level < 4) {
            counts[q.level as usize] += 1;
            chars[q.level as usize] += q.text.chars().count();
        }
    }
    let mut avg = [None; 4];
    for l in 0..4 {
        if counts[l] > 0 {
            avg[l] = Some(chars[l] as f64 / counts[l] as f64);
        }
    }

    CorpusStats {
        n_estimates: n,
        n_queries_per_level: counts,
        mean_effect: mean,
        variance_effect: variance,
        std_effect: variance.sqrt(),
        median_sample_size,
        avg_query_chars_per_level: avg,
        is_empty: n == 0,
        variance_convention: "population".into(),
    }
}

/// Human-readable stats table.
pub fn stats_markdown(stats: &CorpusStats) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Variance convention: {}\n", stats.variance_convention);
    let _ = writeln!(s, "| Statistic | Value |");
    let _ = writeln!(s, "|---|---|");
    let _ = writeln!(s, "| Estimates | {} |", stats.n_estimates);
    let _ = writeln!(s, "| Mean effect | {:.4} |", stats.mean_effect);
    let _ = writeln!(s, "| Variance | {:.4} |", stats.variance_effect);
    let _ = writeln!(s, "| Std. dev. | {:.4} |", stats.std_effect);
    let median = stats
        .median_sample_size
        .map(|m| m.to_string())
        .unwrap_or_else(|| "-".into());
    let _ = writeln!(s, "| Median sample size | {median} |");
    for l in 0..4 {
        let avg = stats.avg_query_chars_per_level[l]
            .map(|a| format!("{a:.0}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "| Query lvl-{l} (count / avg chars) | {} / {avg} |",
            stats.n_queries_per_level[l]
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AidGradePair {
    pub intervention_name: String,
    pub outcome_name: String,
    pub effect_size: f64,
}

pub fn aidgrade_query_text(intervention: &str, outcome: &str) -> String {
    format!("What is the impact of {intervention} on {outcome}?")
}

/// Turns aggregate (intervention, outcome, effect) triples into level-3
/// queries and CI-free gold estimates.
pub fn build_aidgrade_queries(
    pairs: &[AidGradePair],
) -> Result<(Vec<GeneratedQuery>, Vec<Estimate>), DatasetError> {
    let mut seen = HashSet::new();
    let mut queries = Vec::with_capacity(pairs.len());
    let mut golds = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let intervention = p.intervention_name.trim();
        let outcome = p.outcome_name.trim();
        if intervention.is_empty() || outcome.is_empty() {
            return Err(DatasetError::EmptyName(i));
        }
        if !seen.insert((normalize_name(intervention), normalize_name(outcome))) {
            return Err(DatasetError::DuplicatePair(intervention.into(), outcome.into()));
        }
        let estimate_id = format!("aidgrade-{:03}", i + 1);
        let query = GeneratedQuery::canonical(&estimate_id, 3, aidgrade_query_text(intervention, outcome))
            .expect("level 3 is canonical");
        golds.push(Estimate {
            estimate_id: estimate_id.clone(),
            rct_id: estimate_id,
            intervention_desc: intervention.to_string(),
            outcome_desc: outcome.to_string(),
            effect_size: p.effect_size,
            ci_lower: None,
            ci_upper: None,
            sector: None,
            intervention_name: Some(intervention.to_string()),
            outcome_name: Some(outcome.to_string()),
            sample_size: None,
        });
        queries.push(query);
    }
    Ok((queries, golds))
}

/// Lowercased, trimmed, internal whitespace collapsed.
pub fn normalize_name(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedTarget {
    pub query_id: String,
    pub matched_estimate_ids: Vec<String>,
    pub averaged_effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedTargets {
    pub targets: Vec<AveragedTarget>,
    /// Queries with no matching estimate (or no names on their parent).
    pub excluded: Vec<String>,
    pub n_queries: usize,
    pub mean_matched_size: Option<f64>,
}

/// Replaces each query's target with the mean effect of every corpus
/// estimate sharing its parent's intervention and outcome names.
pub fn build_averaged_targets(queries: &[GeneratedQuery], corpus: &EstimateCorpus) -> AveragedTargets {
    let mut by_names: HashMap<(String, String), Vec<&Estimate>> = HashMap::new();
    for e in corpus.estimates() {
        if let (Some(i), Some(o)) = (&e.intervention_name, &e.outcome_name) {
            by_names
                .entry((normalize_name(i), normalize_name(o)))
                .or_default()
                .push(e);
        }
    }
    let index = corpus.index();

    let mut targets = Vec::new();
    let mut excluded = Vec::new();
    for q in queries {
        let matched = index
            .get(q.estimate_id.as_str())
            .and_then(|parent| match (&parent.intervention_name, &parent.outcome_name) {
                (Some(i), Some(o)) => by_names.get(&(normalize_name(i), normalize_name(o))),
                _ => None,
            })
            .filter(|m| !m.is_empty());
        match matched {
            Some(m) => {
                let mean = m.iter().map(|e| e.effect_size).sum::<f64>() / m.len() as f64;
                targets.push(AveragedTarget {
                    query_id: q.query_id.clone(),
                    matched_estimate_ids: m.iter().map(|e| e.estimate_id.clone()).collect(),
                    averaged_effect: mean,
                });
            }
            None => excluded.push(q.query_id.clone()),
        }
    }
    let mean_matched_size = (!targets.is_empty()).then(|| {
        targets.iter().map(|t| t.matched_estimate_ids.len()).sum::<usize>() as f64 / targets.len() as f64
    });
    AveragedTargets {
        targets,
        excluded,
        n_queries: queries.len(),
        mean_matched_size,
    }
}
