//! First pipeline stage: query → synthetic RCT (intervention and outcome
//! descriptions) → linearized predictor input.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::extract::{extract_json, Shape};
use crate::llm::{ChatRequest, Completer};
use crate::querygen::GenerationOptions;
use crate::stage::{complete_parsed, ParseViolation, StageError};
use crate::template::{fill, SYNTHETIC_RCT};
use crate::types::{is_placeholder, SyntheticRct};

pub const INTERVENTION_LABEL: &str = "Intervention: ";
pub const OUTCOME_LABEL: &str = "Outcome: ";
pub const ABSENT_TOKEN: &str = "unspecified";

/// Escapes text placed inside the template's quoted `QUERY: "..."` slot:
/// backslashes and quotes get a backslash, braces are doubled.
pub fn escape_query(query: &str) -> String {
    let mut out = String::with_capacity(query.len());
    for c in query.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '{' => out.push_str("{{"),
            '}' => out.push_str("}}"),
            c => out.push(c),
        }
    }
    out
}

pub fn render_synthrct_prompt(query: &str) -> String {
    fill(SYNTHETIC_RCT, &[("query", &escape_query(query))])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedSynthRct {
    pub rct: SyntheticRct,
    /// Placeholder strings that were normalized to absent.
    pub warnings: Vec<String>,
}

fn field(obj: &serde_json::Map<String, Value>, key: &str, warnings: &mut Vec<String>) -> Result<Option<String>, ParseViolation> {
    match obj.get(key) {
        None => Err(ParseViolation::format(format!("missing key `{key}`"))),
        Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if is_placeholder(s) => {
            warnings.push(format!("{key}: placeholder `{s}` treated as absent"));
            Ok(None)
        }
        Some(Value::String(s)) => Ok(Some(s.trim().to_string())),
        Some(other) => Err(ParseViolation::format(format!("`{key}` must be a string or null, got {other}"))),
    }
}

pub fn parse_synthrct_response(raw: &str) -> Result<ParsedSynthRct, ParseViolation> {
    let value = extract_json(raw, Shape::Object).map_err(ParseViolation::format)?;
    let obj = value.as_object().ok_or_else(|| ParseViolation::format("expected a JSON object"))?;
    if let Some(extra) = obj.keys().find(|k| *k != "intervention" && *k != "outcome") {
        return Err(ParseViolation::format(format!("unexpected key `{extra}`")));
    }
    let mut warnings = Vec::new();
    let intervention = field(obj, "intervention", &mut warnings)?;
    let outcome = field(obj, "outcome", &mut warnings)?;
    Ok(ParsedSynthRct {
        rct: SyntheticRct {
            intervention,
            outcome,
        },
        warnings,
    })
}

/// JSON form that parses back to the same value.
pub fn to_json(s: &SyntheticRct) -> String {
    serde_json::json!({"intervention": s.intervention, "outcome": s.outcome}).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot linearize a synthetic RCT with no intervention and no outcome")]
pub struct BothAbsent;

/// `Intervention: <text>\nOutcome: <text>`, with `unspecified` for an absent
/// field.
pub fn linearize_synthrct(s: &SyntheticRct) -> Result<String, BothAbsent> {
    if s.is_empty() {
        return Err(BothAbsent);
    }
    Ok(linearize_fields(s.intervention.as_deref(), s.outcome.as_deref()))
}

pub fn linearize_fields(intervention: Option<&str>, outcome: Option<&str>) -> String {
    format!(
        "{INTERVENTION_LABEL}{}\n{OUTCOME_LABEL}{}",
        intervention.unwrap_or(ABSENT_TOKEN),
        outcome.unwrap_or(ABSENT_TOKEN)
    )
}

/// Inverse of [`linearize_synthrct`].
pub fn parse_linearized(text: &str) -> Option<SyntheticRct> {
    let body = text.strip_prefix(INTERVENTION_LABEL)?;
    let split = body.rfind(&format!("\n{OUTCOME_LABEL}"))?;
    let intervention = &body[..split];
    let outcome = &body[split + 1 + OUTCOME_LABEL.len()..];
    let present = |s: &str| (s != ABSENT_TOKEN).then(|| s.to_string());
    Some(SyntheticRct {
        intervention: present(intervention),
        outcome: present(outcome),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub rct: SyntheticRct,
    pub warnings: Vec<String>,
    pub retries: u32,
    pub raw: String,
}

pub async fn synthesize(query: &str, client: &dyn Completer, opts: &GenerationOptions) -> Result<Synthesis, StageError> {
    if query.trim().is_empty() {
        return Err(StageError::Precondition("query text is empty".into()));
    }
    let req = ChatRequest::new(&opts.model_id, render_synthrct_prompt(query), "synth-rct")
        .with_temperature(opts.temperature)
        .with_max_output_tokens(opts.max_output_tokens);
    let parsed = complete_parsed(client, &req, opts.format_retries, parse_synthrct_response).await?;
    Ok(Synthesis {
        rct: parsed.value.rct,
        warnings: parsed.value.warnings,
        retries: parsed.retries,
        raw: parsed.raw,
    })
}
