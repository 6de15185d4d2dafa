//! Shared domain vocabulary: estimates, queries, specificity profiles,
//! synthetic RCTs and effect predictions.
//!
//! Every record serializes as one line of JSON using the field names below;
//! that schema is the interchange format of the whole toolkit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TypeError {
    #[error("malformed interval: lower bound {lower} exceeds upper bound {upper}")]
    MalformedInterval { lower: f64, upper: f64 },
    #[error("unknown specificity code `{0}`")]
    UnknownCode(String),
    #[error("specificity level {0} out of range 0..=3")]
    LevelOutOfRange(u8),
    #[error("synthetic RCT field `{field}` is empty or a placeholder")]
    PlaceholderField { field: &'static str },
    #[error("invalid prediction for `{query_id}`: {reason}")]
    InvalidPrediction { query_id: String, reason: String },
}

/// One RCT intervention-outcome pair with its standardized effect.
///
/// `ci_lower`/`ci_upper` are both present for trial-level estimates and both
/// absent for aggregate targets that carry no interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate_id: String,
    pub rct_id: String,
    pub intervention_desc: String,
    pub outcome_desc: String,
    pub effect_size: f64,
    #[serde(default)]
    pub ci_lower: Option<f64>,
    #[serde(default)]
    pub ci_upper: Option<f64>,
    #[serde(default)]
    pub sector: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<u64>,
}

impl Estimate {
    /// The gold interval when both bounds are known.
    pub fn ci(&self) -> Option<(f64, f64)> {
        match (self.ci_lower, self.ci_upper) {
            (Some(l), Some(u)) => Some((l, u)),
            _ => None,
        }
    }

    /// Lists every violated invariant; an empty report means the estimate is valid.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.estimate_id.trim().is_empty() {
            report.push(Violation::EmptyId("estimate_id"));
        }
        if self.rct_id.trim().is_empty() {
            report.push(Violation::EmptyId("rct_id"));
        }
        if self.intervention_desc.trim().is_empty() {
            report.push(Violation::EmptyDescription("intervention_desc"));
        }
        if self.outcome_desc.trim().is_empty() {
            report.push(Violation::EmptyDescription("outcome_desc"));
        }
        if !self.effect_size.is_finite() {
            report.push(Violation::NonFinite("effect_size"));
        }
        match (self.ci_lower, self.ci_upper) {
            (Some(l), Some(u)) => {
                if !l.is_finite() || !u.is_finite() {
                    report.push(Violation::NonFinite("ci"));
                } else if !(l <= self.effect_size && self.effect_size <= u) {
                    report.push(Violation::CiOrdering {
                        lower: l,
                        effect: self.effect_size,
                        upper: u,
                    });
                }
            }
            (None, None) => {}
            _ => report.push(Violation::HalfInterval),
        }
        if self.sample_size == Some(0) {
            report.push(Violation::ZeroSampleSize);
        }
        report
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyId(&'static str),
    EmptyDescription(&'static str),
    NonFinite(&'static str),
    CiOrdering { lower: f64, effect: f64, upper: f64 },
    HalfInterval,
    ZeroSampleSize,
}

impl Violation {
    /// Stable short label, used in error reports.
    pub fn label(&self) -> &'static str {
        match self {
            Violation::EmptyId(_) => "empty id",
            Violation::EmptyDescription(_) => "empty description",
            Violation::NonFinite(_) => "non-finite value",
            Violation::CiOrdering { .. } => "CI ordering",
            Violation::HalfInterval => "half interval",
            Violation::ZeroSampleSize => "zero sample size",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId(field) => write!(f, "empty id: {field}"),
            Violation::EmptyDescription(field) => write!(f, "empty description: {field}"),
            Violation::NonFinite(field) => write!(f, "non-finite value: {field}"),
            Violation::CiOrdering {
                lower,
                effect,
                upper,
            } => write!(f, "CI ordering: expected {lower} <= {effect} <= {upper}"),
            Violation::HalfInterval => write!(f, "half interval: only one CI bound present"),
            Violation::ZeroSampleSize => write!(f, "zero sample size"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn push(&mut self, v: Violation) {
        self.violations.push(v);
    }

    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, label: &str) -> bool {
        self.violations.iter().any(|v| v.label() == label)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

macro_rules! level_enum {
    ($name:ident, $prefix:literal, [$($variant:ident = $n:literal),*]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),*
        }

        impl $name {
            pub fn index(self) -> u8 {
                match self {
                    $($name::$variant => $n),*
                }
            }

            pub fn from_index(i: u8) -> Option<Self> {
                match i {
                    $($n => Some($name::$variant),)*
                    _ => None,
                }
            }
        }

        impl FromStr for $name {
            type Err = TypeError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim() {
                    $(stringify!($variant) => Ok($name::$variant),)*
                    other => Err(TypeError::UnknownCode(other.to_string())),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{}", $prefix, self.index())
            }
        }
    };
}

level_enum!(Implicitness, "I", [I0 = 0, I1 = 1, I2 = 2, I3 = 3]);
level_enum!(Abstraction, "A", [A0 = 0, A1 = 1, A2 = 2, A3 = 3]);
level_enum!(Ambiguity, "U", [U0 = 0, U1 = 1, U2 = 2, U3 = 3]);

/// Position of a query on the implicitness / abstraction / ambiguity grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpecificityProfile {
    pub implicitness: Implicitness,
    pub abstraction: Abstraction,
    pub ambiguity: Ambiguity,
}

impl SpecificityProfile {
    pub fn new(implicitness: Implicitness, abstraction: Abstraction, ambiguity: Ambiguity) -> Self {
        Self {
            implicitness,
            abstraction,
            ambiguity,
        }
    }

    /// The diagonal profile `I{l}A{l}U{l}`.
    pub fn canonical(level: u8) -> Result<Self, TypeError> {
        match (
            Implicitness::from_index(level),
            Abstraction::from_index(level),
            Ambiguity::from_index(level),
        ) {
            (Some(i), Some(a), Some(u)) => Ok(Self::new(i, a, u)),
            _ => Err(TypeError::LevelOutOfRange(level)),
        }
    }

    /// Shared index of a diagonal profile, `None` for off-diagonal combinations.
    pub fn canonical_level(&self) -> Option<u8> {
        let l = self.implicitness.index();
        (self.abstraction.index() == l && self.ambiguity.index() == l).then_some(l)
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical_level().is_some()
    }
}

impl fmt::Display for SpecificityProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.implicitness, self.abstraction, self.ambiguity)
    }
}

/// `<estimate_id>-L<level>`.
pub fn query_id_for(estimate_id: &str, level: u8) -> String {
    format!("{estimate_id}-L{level}")
}

/// Splits a query id back into its estimate id and level, if it follows the
/// `<estimate_id>-L<level>` scheme.
pub fn parse_query_id(query_id: &str) -> Option<(&str, u8)> {
    let (stem, level) = query_id.rsplit_once("-L")?;
    let level: u8 = level.parse().ok()?;
    (level <= 3 && !stem.is_empty()).then_some((stem, level))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub query_id: String,
    pub estimate_id: String,
    pub text: String,
    pub profile: SpecificityProfile,
    pub level: u8,
}

impl GeneratedQuery {
    /// Builds a query at a canonical level with the standard id scheme.
    pub fn canonical(estimate_id: &str, level: u8, text: impl Into<String>) -> Result<Self, TypeError> {
        let profile = SpecificityProfile::canonical(level)?;
        Ok(Self {
            query_id: query_id_for(estimate_id, level),
            estimate_id: estimate_id.to_string(),
            text: text.into(),
            profile,
            level,
        })
    }
}

/// Placeholder strings that models emit instead of null.
pub const PLACEHOLDERS: &[&str] = &[
    "",
    "unknown",
    "n/a",
    "na",
    "none",
    "null",
    "nil",
    "-",
    "?",
    "tbd",
    "unspecified",
    "not specified",
    "not applicable",
    "not available",
    "not mentioned",
    "not stated",
    "not reported",
    "missing",
];

pub fn is_placeholder(text: &str) -> bool {
    let t = text.trim().trim_end_matches('.').to_lowercase();
    PLACEHOLDERS.contains(&t.as_str())
}

/// Intermediate structured representation of a query: a minimal intervention
/// description and a minimal outcome description, each possibly absent.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SyntheticRct {
    pub intervention: Option<String>,
    pub outcome: Option<String>,
}

impl SyntheticRct {
    pub fn new(intervention: Option<String>, outcome: Option<String>) -> Result<Self, TypeError> {
        let s = Self {
            intervention,
            outcome,
        };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<(), TypeError> {
        if self.intervention.as_deref().is_some_and(is_placeholder) {
            return Err(TypeError::PlaceholderField {
                field: "intervention",
            });
        }
        if self.outcome.as_deref().is_some_and(is_placeholder) {
            return Err(TypeError::PlaceholderField { field: "outcome" });
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.intervention.is_none() && self.outcome.is_none()
    }
}

/// A predicted effect with its interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectPrediction {
    pub query_id: String,
    pub predictor_id: String,
    pub effect: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl EffectPrediction {
    /// Strict `ci_lower < effect < ci_upper` over finite values.
    pub fn is_valid(&self) -> bool {
        self.effect.is_finite()
            && self.ci_lower.is_finite()
            && self.ci_upper.is_finite()
            && self.ci_lower < self.effect
            && self.effect < self.ci_upper
    }

    pub fn ensure_valid(self) -> Result<Self, TypeError> {
        if self.is_valid() {
            Ok(self)
        } else {
            Err(TypeError::InvalidPrediction {
                reason: format!(
                    "expected {} < {} < {}",
                    self.ci_lower, self.effect, self.ci_upper
                ),
                query_id: self.query_id,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignificanceClass {
    Positive,
    Negative,
    NonSignificant,
}

impl SignificanceClass {
    pub fn flipped(self) -> Self {
        match self {
            SignificanceClass::Positive => SignificanceClass::Negative,
            SignificanceClass::Negative => SignificanceClass::Positive,
            SignificanceClass::NonSignificant => SignificanceClass::NonSignificant,
        }
    }

    pub const ALL: [SignificanceClass; 3] = [
        SignificanceClass::Positive,
        SignificanceClass::Negative,
        SignificanceClass::NonSignificant,
    ];
}

/// Three-way significance from a 95% interval. Zero on either bound is
/// non-significant.
pub fn classify_significance(ci_lower: f64, ci_upper: f64) -> Result<SignificanceClass, TypeError> {
    if ci_lower.is_nan() || ci_upper.is_nan() || ci_lower > ci_upper {
        return Err(TypeError::MalformedInterval {
            lower: ci_lower,
            upper: ci_upper,
        });
    }
    Ok(if ci_lower > 0.0 {
        SignificanceClass::Positive
    } else if ci_upper < 0.0 {
        SignificanceClass::Negative
    } else {
        SignificanceClass::NonSignificant
    })
}

/// Effects with magnitude strictly above this are economically meaningful.
pub const ECONOMIC_THRESHOLD: f64 = 0.1;

pub fn economically_meaningful(effect: f64, threshold: f64) -> bool {
    effect.abs() > threshold
}
