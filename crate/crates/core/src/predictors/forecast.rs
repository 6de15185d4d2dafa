//! Few-shot prompted forecasting: three labelled exemplars, optional training
//! statistics, then the query. The model answers with a JSON triple.

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{PredictError, Predictor, PredictorInput};
use crate::dataset::CorpusStats;
use crate::extract::{extract_json, Shape};
use crate::llm::{ChatRequest, Completer};
use crate::stage::{complete_parsed, ParseViolation, StageError};
use crate::template::{fill, FORECAST_REFERENCE};
use crate::types::{classify_significance, EffectPrediction, SignificanceClass};

pub const KEY_EFFECT: &str = "Hedges_g";
pub const KEY_LOWER: &str = "Hedges_g_ci_lower";
pub const KEY_UPPER: &str = "Hedges_g_ci_upper";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub query: String,
    pub effect: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl Exemplar {
    pub fn class(&self) -> Result<SignificanceClass, PredictError> {
        classify_significance(self.ci_lower, self.ci_upper).map_err(|e| PredictError::Exemplars(e.to_string()))
    }
}

pub fn class_label(class: SignificanceClass) -> &'static str {
    match class {
        SignificanceClass::Positive => "Positive + Statistically significant",
        SignificanceClass::Negative => "Negative + Statistically significant",
        SignificanceClass::NonSignificant => "Statistically insignificant",
    }
}

/// One exemplar per significance class, in prompt order.
pub fn default_exemplars() -> Vec<Exemplar> {
    vec![
        Exemplar {
            query: "Does providing EMDR sessions help alleviate trauma symptoms\nreported by parents for affected children?".into(),
            effect: 1.5956,
            ci_lower: 0.9756,
            ci_upper: 2.2156,
        },
        Exemplar {
            query: "How does the regular I-2 Newcastle disease vaccination affect\nchick mortality from disease?".into(),
            effect: -1.1956,
            ci_lower: -1.6002,
            ci_upper: -0.791,
        },
        Exemplar {
            query: "How does providing immediate ART during home-based HIV testing\ninfluence overall patient well-being and care effectiveness?".into(),
            effect: 0.0602,
            ci_lower: -0.1807,
            ci_upper: 0.3011,
        },
    ]
}

/// Training-set summary quoted to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsBlock {
    pub mean: f64,
    pub variance: f64,
    pub std: f64,
    #[serde(default)]
    pub median_sample_size: Option<u64>,
}

impl StatsBlock {
    /// The statistics of the reference training split.
    pub fn reference() -> Self {
        Self {
            mean: 0.2669,
            variance: 0.1847,
            std: 0.4297,
            median_sample_size: Some(627),
        }
    }

    fn render(&self) -> String {
        let mut s = format!(
            "Training data effect size distribution:\nMean: {:.4}\nVariance: {:.4}\nStandard Deviation: {:.4}\n\nTherefore most values will be close to the mean value.\n\n",
            self.mean, self.variance, self.std
        );
        if let Some(m) = self.median_sample_size {
            s.push_str(&format!(
                "Additionally, the typical (median) sample size in the training\ndata is {m}.\n\n"
            ));
        }
        s
    }
}

impl From<&CorpusStats> for StatsBlock {
    fn from(s: &CorpusStats) -> Self {
        Self {
            mean: s.mean_effect,
            variance: s.variance_effect,
            std: s.std_effect,
            median_sample_size: s.median_sample_size,
        }
    }
}

struct Parts {
    header: &'static str,
    predict_intro: &'static str,
    query_tail: &'static str,
}

fn parts() -> Parts {
    let r = FORECAST_REFERENCE;
    let ex = r.find("Example 1 (").expect("reference has exemplars");
    let intro = r.find("-----\nNow predict").expect("reference has predict intro");
    let stats = r.find("Training data effect size distribution:").expect("reference has stats");
    let query = r.find("QUERY:\n").expect("reference has query slot");
    Parts {
        header: &r[..ex],
        predict_intro: &r[intro..stats],
        query_tail: &r[query..],
    }
}

fn render_exemplar(n: usize, ex: &Exemplar, class: SignificanceClass) -> String {
    format!(
        "Example {n} ({}):\n\"{}\"\n\nOutput:\n{{\"{KEY_EFFECT}\": {},\n \"{KEY_LOWER}\": {},\n \"{KEY_UPPER}\": {},\n}}\n\n",
        class_label(class),
        ex.query,
        ex.effect,
        ex.ci_lower,
        ex.ci_upper
    )
}

/// Renders the forecasting prompt. Exactly three exemplars are required, one
/// per significance class; without `stats` the statistics paragraph is left
/// out.
pub fn render_forecast_prompt(query: &str, exemplars: &[Exemplar], stats: Option<&StatsBlock>) -> Result<String, PredictError> {
    if exemplars.len() != 3 {
        return Err(PredictError::Exemplars(format!("expected 3 exemplars, got {}", exemplars.len())));
    }
    let classes = exemplars.iter().map(Exemplar::class).collect::<Result<Vec<_>, _>>()?;
    for c in SignificanceClass::ALL {
        if !classes.contains(&c) {
            return Err(PredictError::Exemplars(format!("no exemplar labelled `{}`", class_label(c))));
        }
    }
    let p = parts();
    let mut out = String::from(p.header);
    for (i, (ex, class)) in exemplars.iter().zip(classes).enumerate() {
        out.push_str(&render_exemplar(i + 1, ex, class));
    }
    out.push_str(p.predict_intro);
    if let Some(s) = stats {
        out.push_str(&s.render());
    }
    out.push_str(&fill(p.query_tail, &[("query", query)]));
    Ok(out)
}

/// Accepted range for the predicted effect, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for EffectBounds {
    fn default() -> Self {
        Self { min: -2.0, max: 2.0 }
    }
}

fn number(obj: &serde_json::Map<String, Value>, key: &str) -> Result<f64, ParseViolation> {
    match obj.get(key) {
        None => Err(ParseViolation::format(format!("missing key `{key}`"))),
        Some(Value::Number(n)) => n
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| ParseViolation::format(format!("`{key}` is not a finite number"))),
        Some(other) => Err(ParseViolation::format(format!("`{key}` must be a number, got {other}"))),
    }
}

/// Returns `(effect, ci_lower, ci_upper)`. Every violation is a format
/// violation so the caller may re-ask.
pub fn parse_forecast_response(raw: &str, bounds: EffectBounds) -> Result<(f64, f64, f64), ParseViolation> {
    let value = extract_json(raw, Shape::Object).map_err(ParseViolation::format)?;
    let obj = value.as_object().ok_or_else(|| ParseViolation::format("expected a JSON object"))?;
    let g = number(obj, KEY_EFFECT)?;
    let l = number(obj, KEY_LOWER)?;
    let u = number(obj, KEY_UPPER)?;
    if g < bounds.min || g > bounds.max {
        return Err(ParseViolation::format(format!(
            "{KEY_EFFECT} = {g} outside [{}, {}]",
            bounds.min, bounds.max
        )));
    }
    if !(l < g && g < u) {
        return Err(ParseViolation::format(format!("interval ordering violated: {l} < {g} < {u} is false")));
    }
    Ok((g, l, u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastOptions {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub format_retries: u32,
    pub bounds: EffectBounds,
    pub exemplars: Vec<Exemplar>,
    pub stats: Option<StatsBlock>,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        Self {
            model_id: String::new(),
            temperature: 0.0,
            max_output_tokens: 256,
            format_retries: 1,
            bounds: EffectBounds::default(),
            exemplars: default_exemplars(),
            stats: None,
        }
    }
}

pub struct PromptedPredictor {
    id: String,
    client: Arc<dyn Completer>,
    options: ForecastOptions,
}

impl PromptedPredictor {
    /// Validates the exemplars up front so a bad configuration fails before
    /// any request is made.
    pub fn new(id: impl Into<String>, client: Arc<dyn Completer>, options: ForecastOptions) -> Result<Self, PredictError> {
        render_forecast_prompt("probe", &options.exemplars, options.stats.as_ref())?;
        Ok(Self {
            id: id.into(),
            client,
            options,
        })
    }

    pub fn options(&self) -> &ForecastOptions {
        &self.options
    }
}

#[async_trait]
impl Predictor for PromptedPredictor {
    fn id(&self) -> &str {
        &self.id
    }

    async fn predict(&self, input: &PredictorInput) -> Result<EffectPrediction, PredictError> {
        input.check()?;
        let o = &self.options;
        let prompt = render_forecast_prompt(&input.text, &o.exemplars, o.stats.as_ref())?;
        let req = ChatRequest::new(&o.model_id, prompt, "forecast")
            .with_temperature(o.temperature)
            .with_max_output_tokens(o.max_output_tokens);
        let bounds = o.bounds;
        let parsed = complete_parsed(self.client.as_ref(), &req, o.format_retries, |raw| {
            parse_forecast_response(raw, bounds)
        })
        .await
        .map_err(|e| match e {
            StageError::Upstream(u) => PredictError::Upstream(u),
            StageError::Precondition(m) => PredictError::InvalidInput(m),
            StageError::Unparseable { violation, raw, .. } => PredictError::Failed {
                message: violation.message,
                raw,
            },
        })?;
        let (effect, ci_lower, ci_upper) = parsed.value;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::testing::Scripted;
    use proptest::prelude::*;

    #[test]
    fn default_render_matches_reference() {
        let p = render_forecast_prompt("{query}", &default_exemplars(), Some(&StatsBlock::reference())).unwrap();
        assert_eq!(p, FORECAST_REFERENCE);
    }

    #[test]
    fn render_without_stats_omits_paragraph() {
        let p = render_forecast_prompt("Q?", &default_exemplars(), None).unwrap();
        assert!(!p.contains("Training data effect size distribution"));
        assert!(p.ends_with("estimations.\n\nQUERY:\nQ?\n"));
        let no_median = StatsBlock {
            median_sample_size: None,
            ..StatsBlock::reference()
        };
        let p = render_forecast_prompt("Q?", &default_exemplars(), Some(&no_median)).unwrap();
        assert!(p.contains("Mean: 0.2669"));
        assert!(!p.contains("Additionally"));
    }

    #[test]
    fn exemplars_must_cover_classes() {
        let mut ex = default_exemplars();
        ex[1] = ex[0].clone();
        assert!(matches!(render_forecast_prompt("Q", &ex, None), Err(PredictError::Exemplars(_))));
        assert!(render_forecast_prompt("Q", &default_exemplars()[..2], None).is_err());
        // Order is free; labels follow the intervals.
        let mut ex = default_exemplars();
        ex.reverse();
        let p = render_forecast_prompt("Q", &ex, None).unwrap();
        assert!(p.contains("Example 1 (Statistically insignificant):"));
    }

    #[test]
    fn parse_examples() {
        let b = EffectBounds::default();
        assert_eq!(
            parse_forecast_response(r#"{"Hedges_g": 0.12, "Hedges_g_ci_lower": -0.05, "Hedges_g_ci_upper": 0.29}"#, b).unwrap(),
            (0.12, -0.05, 0.29)
        );
        // The reference output format has a trailing comma.
        assert!(parse_forecast_response("{\"Hedges_g\": 0.1,\n \"Hedges_g_ci_lower\": 0.0,\n \"Hedges_g_ci_upper\": 0.2,\n}", b).is_ok());
        for bad in [
            r#"{"Hedges_g": 2.5, "Hedges_g_ci_lower": 2.0, "Hedges_g_ci_upper": 3.0}"#,
            r#"{"Hedges_g": 0.1, "Hedges_g_ci_lower": 0.2, "Hedges_g_ci_upper": 0.3}"#,
            r#"{"Hedges_g": 0.1, "Hedges_g_ci_lower": 0.1, "Hedges_g_ci_upper": 0.3}"#,
            r#"{"Hedges_g": "0.1", "Hedges_g_ci_lower": 0.0, "Hedges_g_ci_upper": 0.3}"#,
            r#"{"Hedges_g": 0.1, "Hedges_g_ci_upper": 0.3}"#,
            "I cannot answer that.",
        ] {
            let v = parse_forecast_response(bad, b).unwrap_err();
            assert!(v.is_retryable(), "{bad}");
        }
        assert!(parse_forecast_response(r#"{"Hedges_g": 2.0, "Hedges_g_ci_lower": 1.5, "Hedges_g_ci_upper": 2.5}"#, b).is_ok());
    }

    proptest! {
        #[test]
        fn valid_triples_round_trip(g in -2.0f64..=2.0, dl in 1e-6f64..1.0, du in 1e-6f64..1.0) {
            let (l, u) = (g - dl, g + du);
            prop_assume!(l < g && g < u);
            let raw = serde_json::json!({KEY_EFFECT: g, KEY_LOWER: l, KEY_UPPER: u}).to_string();
            prop_assert_eq!(parse_forecast_response(&raw, EffectBounds::default()).unwrap(), (g, l, u));
        }

        #[test]
        fn accepted_iff_contract_holds(g in -3.0f64..3.0, l in -3.0f64..3.0, u in -3.0f64..3.0) {
            let raw = serde_json::json!({KEY_EFFECT: g, KEY_LOWER: l, KEY_UPPER: u}).to_string();
            let ok = parse_forecast_response(&raw, EffectBounds::default()).is_ok();
            prop_assert_eq!(ok, (-2.0..=2.0).contains(&g) && l < g && g < u);
        }
    }

    #[tokio::test]
    async fn predictor_retries_once_then_fails() {
        let client = Arc::new(Scripted::new([
            "no idea",
            r#"{"Hedges_g": 0.3, "Hedges_g_ci_lower": 0.1, "Hedges_g_ci_upper": 0.5}"#,
            "still nothing",
            "nope",
        ]));
        let p = PromptedPredictor::new("llm", client.clone(), ForecastOptions::default()).unwrap();
        let ok = p.predict(&PredictorInput::new("q1", "Does X raise Y?", Some(1))).await.unwrap();
        assert_eq!((ok.effect, ok.ci_lower, ok.ci_upper), (0.3, 0.1, 0.5));
        let err = p.predict(&PredictorInput::new("q2", "Does X raise Y?", Some(1))).await.unwrap_err();
        assert!(matches!(err, PredictError::Failed { ref raw, .. } if raw == "nope"));
        assert_eq!(client.calls(), 4);
    }
}
