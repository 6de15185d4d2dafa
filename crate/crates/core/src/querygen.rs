//! Four specificity-leveled queries per estimate: prompt rendering, response
//! parsing, and soft constraint checks on the generated text.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::extract::{extract_json, extract_objects, Shape};
use crate::llm::{ChatRequest, Completer};
use crate::stage::{complete_parsed, ParseViolation, StageError};
use crate::template::{fill, QUERY_GENERATION};
use crate::types::{query_id_for, Abstraction, Ambiguity, Estimate, GeneratedQuery, Implicitness, SpecificityProfile};

pub const SECTOR_DEFAULT: &str = "unspecified";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Template slots filled with a default because the source lacked a value.
    pub defaulted: Vec<&'static str>,
}

pub fn render_query_prompt(e: &Estimate) -> RenderedPrompt {
    let mut defaulted = Vec::new();
    let sector = match e.sector.as_deref().map(str::trim) {
        Some(s) if !s.is_empty() => s,
        _ => {
            defaulted.push("sector");
            SECTOR_DEFAULT
        }
    };
    let text = fill(
        QUERY_GENERATION,
        &[
            ("intervention_description", e.intervention_desc.as_str()),
            ("outcome_description", e.outcome_desc.as_str()),
            ("sector", sector),
        ],
    );
    RenderedPrompt { text, defaulted }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub text: String,
    pub profile: SpecificityProfile,
}

/// Exactly four entries, one per canonical level, in level order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGenResponse {
    pub entries: Vec<QueryEntry>,
}

impl QueryGenResponse {
    pub fn into_queries(self, estimate_id: &str) -> Vec<GeneratedQuery> {
        self.entries
            .into_iter()
            .map(|entry| {
                let level = entry.profile.canonical_level().expect("validated canonical");
                GeneratedQuery {
                    query_id: query_id_for(estimate_id, level),
                    estimate_id: estimate_id.to_string(),
                    text: entry.text,
                    profile: entry.profile,
                    level,
                }
            })
            .collect()
    }
}

fn code<T: std::str::FromStr>(difficulty: &Value, key: &str, idx: usize) -> Result<T, ParseViolation> {
    let raw = difficulty
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| ParseViolation::format(format!("entry {idx}: missing difficulty.{key}")))?;
    raw.parse()
        .map_err(|_| ParseViolation::format(format!("entry {idx}: unknown {key} code `{raw}`")))
}

pub fn parse_query_response(raw: &str) -> Result<QueryGenResponse, ParseViolation> {
    let items = match extract_json(raw, Shape::Array) {
        Ok(Value::Array(items)) => items,
        _ => {
            let objs = extract_objects(raw);
            if objs.is_empty() {
                return Err(ParseViolation::format("no JSON array or objects in response"));
            }
            objs
        }
    };
    if items.len() != 4 {
        return Err(ParseViolation::format(format!("expected 4 entries, got {}", items.len())));
    }

    let mut entries = Vec::with_capacity(4);
    for (idx, item) in items.iter().enumerate() {
        let text = item
            .get("query")
            .and_then(Value::as_str)
            .ok_or_else(|| ParseViolation::format(format!("entry {idx}: missing string field `query`")))?;
        let difficulty = item
            .get("difficulty")
            .filter(|d| d.is_object())
            .ok_or_else(|| ParseViolation::format(format!("entry {idx}: missing object field `difficulty`")))?;
        let profile = SpecificityProfile::new(
            code::<Implicitness>(difficulty, "implicitness", idx)?,
            code::<Abstraction>(difficulty, "abstraction", idx)?,
            code::<Ambiguity>(difficulty, "ambiguity", idx)?,
        );
        if text.trim().is_empty() {
            return Err(ParseViolation::content(format!("entry {idx}: empty query text")));
        }
        entries.push(QueryEntry {
            text: text.trim().to_string(),
            profile,
        });
    }

    let mut seen = [false; 4];
    for (idx, e) in entries.iter().enumerate() {
        let level = e
            .profile
            .canonical_level()
            .ok_or_else(|| ParseViolation::content(format!("entry {idx}: non-canonical profile {}", e.profile)))?;
        if std::mem::replace(&mut seen[level as usize], true) {
            return Err(ParseViolation::content(format!("level {level} generated twice")));
        }
    }
    entries.sort_by_key(|e| e.profile.canonical_level());
    Ok(QueryGenResponse { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    MultiSentence,
    Unterminated,
    UnsupportedNumber,
    DefaultedSlot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryWarning {
    pub query_id: String,
    pub kind: WarningKind,
    pub message: String,
}

const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "etc.", "vs.", "cf.", "al.", "approx.", "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "no.",
    "inc.", "ltd.", "co.", "jr.", "sr.", "fig.", "vol.", "dept.", "est.", "min.", "max.", "avg.", "govt.",
];

fn initialism() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[a-z]\.)+$").expect("static regex"))
}

/// Checks the single-sentence constraint: one terminal mark at the end and no
/// interior sentence boundary. Returns a warning description, if any.
pub fn sentence_issue(text: &str) -> Option<(WarningKind, String)> {
    let t = text.trim();
    let mut tail = t.chars().rev().skip_while(|c| matches!(c, '"' | '\'' | ')' | '”' | '’'));
    match (tail.next(), tail.next()) {
        (Some(a), Some(b)) if is_terminal(a) && is_terminal(b) => {
            return Some((WarningKind::Unterminated, "multiple terminal punctuation marks".into()))
        }
        (Some(a), _) if is_terminal(a) => {}
        _ => return Some((WarningKind::Unterminated, "no sentence-final punctuation".into())),
    }

    let tokens: Vec<&str> = t.split_whitespace().collect();
    for pair in tokens.windows(2) {
        let token = pair[0].trim_end_matches(['"', '\'', ')', '”', '’']);
        let Some(last) = token.chars().last() else { continue };
        if !is_terminal(last) {
            continue;
        }
        let next_starts_upper = pair[1]
            .trim_start_matches(['"', '\'', '(', '“', '‘'])
            .chars()
            .next()
            .is_some_and(char::is_uppercase);
        if last == '.' {
            let lower = token.to_lowercase();
            let bare = lower.trim_start_matches(['"', '\'', '(', '“', '‘']);
            if ABBREVIATIONS.contains(&bare) || initialism().is_match(bare) {
                continue;
            }
        }
        if next_starts_upper {
            return Some((WarningKind::MultiSentence, format!("sentence boundary after `{token}`")));
        }
    }
    None
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

fn number_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:[.,]\d+)*").expect("static regex"))
}

/// Numeric tokens in `query` that do not appear verbatim in any source text.
pub fn unsupported_numbers(query: &str, sources: &[&str]) -> Vec<String> {
    number_token()
        .find_iter(query)
        .map(|m| m.as_str())
        .filter(|tok| !sources.iter().any(|s| s.contains(tok)))
        .map(str::to_string)
        .collect()
}

pub fn check_query(q: &GeneratedQuery, source: &Estimate) -> Vec<QueryWarning> {
    let mut out = Vec::new();
    if let Some((kind, message)) = sentence_issue(&q.text) {
        out.push(QueryWarning {
            query_id: q.query_id.clone(),
            kind,
            message,
        });
    }
    let missing = unsupported_numbers(&q.text, &[&source.intervention_desc, &source.outcome_desc]);
    if !missing.is_empty() {
        out.push(QueryWarning {
            query_id: q.query_id.clone(),
            kind: WarningKind::UnsupportedNumber,
            message: format!("numbers not in source: {}", missing.join(", ")),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationOptions {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub format_retries: u32,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            model_id: String::new(),
            temperature: 0.0,
            max_output_tokens: 2048,
            format_retries: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryGeneration {
    pub queries: Vec<GeneratedQuery>,
    pub warnings: Vec<QueryWarning>,
    pub retries: u32,
    pub raw: String,
}

pub async fn generate_queries(
    e: &Estimate,
    client: &dyn Completer,
    opts: &GenerationOptions,
) -> Result<QueryGeneration, StageError> {
    let report = e.validate();
    if !report.is_valid() {
        return Err(StageError::Precondition(format!("estimate {}: {report}", e.estimate_id)));
    }
    let prompt = render_query_prompt(e);
    let req = ChatRequest::new(&opts.model_id, prompt.text, "generate-queries")
        .with_temperature(opts.temperature)
        .with_max_output_tokens(opts.max_output_tokens);
    let parsed = complete_parsed(client, &req, opts.format_retries, parse_query_response).await?;
    let queries = parsed.value.into_queries(&e.estimate_id);
    let mut warnings: Vec<QueryWarning> = queries.iter().flat_map(|q| check_query(q, e)).collect();
    for slot in prompt.defaulted {
        warnings.push(QueryWarning {
            query_id: query_id_for(&e.estimate_id, 0),
            kind: WarningKind::DefaultedSlot,
            message: format!("`{slot}` filled with `{SECTOR_DEFAULT}`"),
        });
    }
    Ok(QueryGeneration {
        queries,
        warnings,
        retries: parsed.retries,
        raw: parsed.raw,
    })
}

/// A well-formed response for tests and mock upstreams.
pub fn example_response(texts: [&str; 4]) -> String {
    let items: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(l, t)| {
            serde_json::json!({
                "query": t,
                "difficulty": {
                    "implicitness": format!("I{l}"),
                    "abstraction": format!("A{l}"),
                    "ambiguity": format!("U{l}"),
                }
            })
        })
        .collect();
    serde_json::to_string_pretty(&items).expect("json values serialize")
}
