//! Evaluation metrics, the Hedges' g utility and report assembly.
//!
//! Arithmetic is done in full double precision. Report values are rounded to
//! four decimals only when serialized.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::dataset::AveragedTargets;
use crate::types::{
    classify_significance, economically_meaningful, parse_query_id, EffectPrediction, Estimate, SignificanceClass,
    TypeError, ECONOMIC_THRESHOLD,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions vs {1} golds")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("{0} is undefined for this input")]
    Degenerate(&'static str),
    #[error(transparent)]
    MalformedInterval(#[from] TypeError),
    #[error("pooled standard deviation must be positive")]
    ZeroPooledSd,
    #[error("n_t + n_c must be at least 3")]
    DegenerateFreedom,
    #[error("no prediction joins a gold record")]
    NoJoinablePairs,
}

fn check(p: &[f64], g: &[f64]) -> Result<usize, MetricError> {
    if p.len() != g.len() {
        return Err(MetricError::LengthMismatch(p.len(), g.len()));
    }
    if p.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(p.len())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn rmse(preds: &[f64], golds: &[f64]) -> Result<f64, MetricError> {
    let n = check(preds, golds)?;
    let sse: f64 = preds.iter().zip(golds).map(|(p, g)| (p - g).powi(2)).sum();
    Ok((sse / n as f64).sqrt())
}

pub fn mae(preds: &[f64], golds: &[f64]) -> Result<f64, MetricError> {
    let n = check(preds, golds)?;
    Ok(preds.iter().zip(golds).map(|(p, g)| (p - g).abs()).sum::<f64>() / n as f64)
}

/// `1 - SS_res / SS_tot`; undefined when the golds are constant.
pub fn r2(preds: &[f64], golds: &[f64]) -> Result<f64, MetricError> {
    let n = check(preds, golds)?;
    if n < 2 {
        return Err(MetricError::Degenerate("r2"));
    }
    let m = mean(golds);
    let ss_tot: f64 = golds.iter().map(|g| (g - m).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::Degenerate("r2"));
    }
    let ss_res: f64 = preds.iter().zip(golds).map(|(p, g)| (g - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn pearson(preds: &[f64], golds: &[f64]) -> Result<f64, MetricError> {
    let n = check(preds, golds)?;
    if n < 2 {
        return Err(MetricError::Degenerate("pearson"));
    }
    let (mp, mg) = (mean(preds), mean(golds));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        let (dx, dy) = (p - mp, g - mg);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Degenerate("pearson"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(preds: &[f64], golds: &[f64]) -> Result<f64, MetricError> {
    check(preds, golds)?;
    pearson(&mid_ranks(preds), &mid_ranks(golds)).map_err(|_| MetricError::Degenerate("spearman"))
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of pairs whose signs agree, with `sign(0) = 0`.
pub fn direction_accuracy(preds: &[f64], golds: &[f64]) -> Result<f64, MetricError> {
    let n = check(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| sign(**p) == sign(**g)).count();
    Ok(hits as f64 / n as f64)
}

/// Accuracy of the "meaningful iff |v| > threshold" label.
pub fn economic_significance_accuracy(preds: &[f64], golds: &[f64], threshold: f64) -> Result<f64, MetricError> {
    let n = check(preds, golds)?;
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| economically_meaningful(**p, threshold) == economically_meaningful(**g, threshold))
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSigScores {
    pub micro_f1: f64,
    pub accuracy: f64,
}

fn class_index(c: SignificanceClass) -> usize {
    match c {
        SignificanceClass::Positive => 0,
        SignificanceClass::Negative => 1,
        SignificanceClass::NonSignificant => 2,
    }
}

/// Micro-averaged F1 from the 3x3 confusion matrix, and plain accuracy.
/// On this single-label task the two coincide; both are computed.
pub fn stat_sig_scores(pred_cis: &[(f64, f64)], gold_cis: &[(f64, f64)]) -> Result<StatSigScores, MetricError> {
    if pred_cis.len() != gold_cis.len() {
        return Err(MetricError::LengthMismatch(pred_cis.len(), gold_cis.len()));
    }
    if pred_cis.is_empty() {
        return Err(MetricError::Empty);
    }
    // confusion[gold][pred]
    let mut confusion = [[0usize; 3]; 3];
    let mut hits = 0usize;
    for (p, g) in pred_cis.iter().zip(gold_cis) {
        let pc = classify_significance(p.0, p.1)?;
        let gc = classify_significance(g.0, g.1)?;
        confusion[class_index(gc)][class_index(pc)] += 1;
        hits += usize::from(pc == gc);
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for k in 0..3 {
        let col: usize = (0..3).map(|r| confusion[r][k]).sum();
        let row: usize = confusion[k].iter().sum();
        tp += confusion[k][k];
        fp += col - confusion[k][k];
        fnn += row - confusion[k][k];
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fnn) as f64;
    let micro_f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(StatSigScores {
        micro_f1,
        accuracy: hits as f64 / pred_cis.len() as f64,
    })
}

pub fn stat_sig_f1(pred_cis: &[(f64, f64)], gold_cis: &[(f64, f64)]) -> Result<f64, MetricError> {
    stat_sig_scores(pred_cis, gold_cis).map(|s| s.micro_f1)
}

/// Fraction of predictions with `ci_lower < effect < ci_upper`.
pub fn ci_valid_rate(preds: &[EffectPrediction]) -> Result<f64, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(preds.iter().filter(|p| p.is_valid()).count() as f64 / preds.len() as f64)
}

/// Small-sample correction `J = 1 - 3 / (4 (n_t + n_c - 2) - 1)`.
pub fn hedges_j(n_t: u64, n_c: u64) -> Result<f64, MetricError> {
    let n = n_t + n_c;
    if n < 3 {
        return Err(MetricError::DegenerateFreedom);
    }
    Ok(1.0 - 3.0 / (4.0 * (n - 2) as f64 - 1.0))
}

/// Bias-corrected standardized mean difference.
pub fn hedges_g(mean_t: f64, mean_c: f64, pooled_sd: f64, n_t: u64, n_c: u64) -> Result<f64, MetricError> {
    if !(pooled_sd > 0.0) {
        return Err(MetricError::ZeroPooledSd);
    }
    Ok(hedges_j(n_t, n_c)? * (mean_t - mean_c) / pooled_sd)
}

/// One item that produced no prediction, written to the failures sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFailure {
    pub query_id: String,
    pub predictor_id: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gold {
    pub effect: f64,
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldKind {
    Estimates,
    Averaged,
}

/// Gold values keyed by estimate id (or query id for averaged targets).
#[derive(Debug, Clone, PartialEq)]
pub struct GoldTable {
    kind: GoldKind,
    by_id: HashMap<String, Gold>,
}

impl GoldTable {
    pub fn from_estimates<'a>(golds: impl IntoIterator<Item = &'a Estimate>) -> Self {
        Self {
            kind: GoldKind::Estimates,
            by_id: golds
                .into_iter()
                .map(|e| {
                    (
                        e.estimate_id.clone(),
                        Gold {
                            effect: e.effect_size,
                            ci: e.ci(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_averaged(targets: &AveragedTargets) -> Self {
        Self {
            kind: GoldKind::Averaged,
            by_id: targets
                .targets
                .iter()
                .map(|t| {
                    (
                        t.query_id.clone(),
                        Gold {
                            effect: t.averaged_effect,
                            ci: None,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn kind(&self) -> GoldKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Exact id first, then the estimate id embedded in a query id.
    pub fn lookup(&self, query_id: &str) -> Option<&Gold> {
        self.by_id.get(query_id).or_else(|| {
            if self.kind == GoldKind::Averaged {
                return None;
            }
            parse_query_id(query_id).and_then(|(est, _)| self.by_id.get(est))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub econ_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            econ_threshold: ECONOMIC_THRESHOLD,
        }
    }
}

fn round4(x: f64) -> f64 {
    let r = (x * 1e4).round() / 1e4;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn ser_round<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round4(*x))
}

fn ser_round_opt<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match x {
        Some(v) => s.serialize_some(&round4(*v)),
        None => s.serialize_none(),
    }
}

pub const EXCLUDED_FAILURE: &str = "prediction_failure";
pub const EXCLUDED_NO_GOLD: &str = "no_gold";
pub const EXCLUDED_INVALID_CI: &str = "invalid_ci";
/// Averaged-target mode: the query's parent matched no corpus estimate.
pub const EXCLUDED_NO_MATCH: &str = "no_matched_estimates";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gold_kind: GoldKind,
    #[serde(default)]
    pub predictor_ids: Vec<String>,
    #[serde(serialize_with = "ser_round")]
    pub rmse: f64,
    #[serde(serialize_with = "ser_round")]
    pub mae: f64,
    #[serde(serialize_with = "ser_round_opt")]
    pub r2: Option<f64>,
    #[serde(serialize_with = "ser_round_opt")]
    pub pearson: Option<f64>,
    #[serde(serialize_with = "ser_round_opt")]
    pub spearman: Option<f64>,
    #[serde(serialize_with = "ser_round")]
    pub direction_acc: f64,
    #[serde(serialize_with = "ser_round")]
    pub econ_acc: f64,
    #[serde(serialize_with = "ser_round_opt")]
    pub stat_sig_f1: Option<f64>,
    #[serde(serialize_with = "ser_round_opt")]
    pub stat_sig_accuracy: Option<f64>,
    #[serde(serialize_with = "ser_round")]
    pub ci_valid_rate: f64,
    pub n_scored: usize,
    pub n_excluded: usize,
    /// Scored pairs whose gold has no interval, left out of the
    /// significance metrics only.
    pub n_missing_gold_ci: usize,
    pub exclusions: BTreeMap<String, usize>,
    pub degeneracy_flags: Vec<String>,
}

impl MetricReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores predictions against golds. Failures and predictions that cannot be
/// scored are counted in `n_excluded`, so `n_scored + n_excluded` equals the
/// number of submitted items.
pub fn evaluate(
    preds: &[EffectPrediction],
    failures: &[PredictionFailure],
    golds: &GoldTable,
    cfg: &EvalConfig,
) -> Result<MetricReport, MetricError> {
    let mut exclusions: BTreeMap<String, usize> = BTreeMap::new();
    if !failures.is_empty() {
        exclusions.insert(EXCLUDED_FAILURE.into(), failures.len());
    }
    let mut p_eff = Vec::new();
    let mut g_eff = Vec::new();
    let mut p_ci = Vec::new();
    let mut g_ci = Vec::new();
    let mut n_missing_gold_ci = 0;
    for p in preds {
        let Some(gold) = golds.lookup(&p.query_id) else {
            let reason = match golds.kind() {
                GoldKind::Estimates => EXCLUDED_NO_GOLD,
                GoldKind::Averaged => EXCLUDED_NO_MATCH,
            };
            *exclusions.entry(reason.into()).or_default() += 1;
            continue;
        };
        if !p.is_valid() {
            *exclusions.entry(EXCLUDED_INVALID_CI.into()).or_default() += 1;
            continue;
        }
        p_eff.push(p.effect);
        g_eff.push(gold.effect);
        match gold.ci {
            Some(ci) if golds.kind() == GoldKind::Estimates => {
                p_ci.push((p.ci_lower, p.ci_upper));
                g_ci.push(ci);
            }
            _ => n_missing_gold_ci += 1,
        }
    }
    if p_eff.is_empty() {
        return Err(MetricError::NoJoinablePairs);
    }
    let mut flags = Vec::new();
    let mut optional = |name: &str, r: Result<f64, MetricError>| match r {
        Ok(v) => Some(v),
        Err(_) => {
            flags.push(format!("{name}_undefined"));
            None
        }
    };
    let r2v = optional("r2", r2(&p_eff, &g_eff));
    let pv = optional("pearson", pearson(&p_eff, &g_eff));
    let sv = optional("spearman", spearman(&p_eff, &g_eff));
    let sig = if g_ci.is_empty() {
        flags.push("stat_sig_unavailable".into());
        None
    } else {
        Some(stat_sig_scores(&p_ci, &g_ci)?)
    };
    let predictor_ids: BTreeSet<String> = preds.iter().map(|p| p.predictor_id.clone()).collect();
    let n_excluded = exclusions.values().sum();
    Ok(MetricReport {
        gold_kind: golds.kind(),
        predictor_ids: predictor_ids.into_iter().collect(),
        rmse: rmse(&p_eff, &g_eff)?,
        mae: mae(&p_eff, &g_eff)?,
        r2: r2v,
        pearson: pv,
        spearman: sv,
        direction_acc: direction_accuracy(&p_eff, &g_eff)?,
        econ_acc: economic_significance_accuracy(&p_eff, &g_eff, cfg.econ_threshold)?,
        stat_sig_f1: sig.map(|s| s.micro_f1),
        stat_sig_accuracy: sig.map(|s| s.accuracy),
        ci_valid_rate: if preds.is_empty() { 0.0 } else { ci_valid_rate(preds)? },
        n_scored: p_eff.len(),
        n_excluded,
        n_missing_gold_ci,
        exclusions,
        degeneracy_flags: flags,
    })
}

pub const MARKDOWN_COLUMNS: [&str; 8] = [
    "RMSE",
    "MAE",
    "R²",
    "Pearson",
    "Spearman",
    "Direction",
    "Econ. Sign.",
    "Stat. Sign.",
];

pub fn fmt4(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.4}", round4(x)),
        None => "n/a".to_string(),
    }
}

/// Metric cells in table column order.
pub fn markdown_cells(r: &MetricReport) -> [Option<f64>; 8] {
    [
        Some(r.rmse),
        Some(r.mae),
        r.r2,
        r.pearson,
        r.spearman,
        Some(r.direction_acc),
        Some(r.econ_acc),
        r.stat_sig_f1,
    ]
}

pub fn markdown_header(first: &str) -> String {
    let mut s = format!("| {first} | {} |\n", MARKDOWN_COLUMNS.join(" | "));
    s.push_str(&format!("|---|{}\n", "---:|".repeat(MARKDOWN_COLUMNS.len())));
    s
}

pub fn report_markdown(name: &str, r: &MetricReport) -> String {
    let cells: Vec<String> = markdown_cells(r).into_iter().map(fmt4).collect();
    let mut s = markdown_header("Run");
    s.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
    s.push_str(&format!(
        "\nScored: {}, excluded: {}, CI-valid rate: {:.4}\n",
        r.n_scored, r.n_excluded, round4(r.ci_valid_rate)
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(id: &str, e: f64, l: f64, u: f64) -> EffectPrediction {
        EffectPrediction {
            query_id: id.into(),
            predictor_id: "p".into(),
            effect: e,
            ci_lower: l,
            ci_upper: u,
            flags: vec![],
        }
    }

    fn est(id: &str, e: f64, ci: Option<(f64, f64)>) -> Estimate {
        Estimate {
            estimate_id: id.into(),
            rct_id: format!("r{id}"),
            intervention_desc: "i".into(),
            outcome_desc: "o".into(),
            effect_size: e,
            ci_lower: ci.map(|c| c.0),
            ci_upper: ci.map(|c| c.1),
            sector: None,
            intervention_name: None,
            outcome_name: None,
            sample_size: None,
        }
    }

    #[test]
    fn hand_examples() {
        assert_eq!(rmse(&[0.0, 0.0], &[0.2, -0.2]).unwrap(), 0.2);
        assert!((mae(&[0.0, 0.0], &[0.2, -0.2]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(rmse(&[], &[]), Err(MetricError::Empty));
        assert_eq!(mae(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch(1, 2)));
        let g = [0.1, 0.5, -0.3, 0.9];
        assert_eq!(r2(&g, &g).unwrap(), 1.0);
        let m = mean(&g);
        assert!(r2(&[m; 4], &g).unwrap().abs() < 1e-15);
        assert!(r2(&[m + 0.2; 4], &g).unwrap() < 0.0);
        assert_eq!(r2(&g, &[0.2; 4]), Err(MetricError::Degenerate("r2")));
        let affine: Vec<f64> = g.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&affine, &g).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert!((pearson(&neg, &g).unwrap() + 1.0).abs() < 1e-12);
        let cubed: Vec<f64> = g.iter().map(|x| x * x * x).collect();
        assert!((spearman(&cubed, &g).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&neg, &g).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mid_ranks_with_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0]);
        assert_eq!(mid_ranks(&[5.0, 5.0, 5.0]), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn direction_zero_convention() {
        assert_eq!(direction_accuracy(&[0.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(direction_accuracy(&[0.0], &[0.1]).unwrap(), 0.0);
        assert_eq!(direction_accuracy(&[0.3, -0.2], &[-0.3, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn economic_examples() {
        assert_eq!(economic_significance_accuracy(&[0.05], &[-0.0129], 0.1).unwrap(), 1.0);
        assert_eq!(economic_significance_accuracy(&[0.05], &[0.204], 0.1).unwrap(), 0.0);
        assert_eq!(economic_significance_accuracy(&[0.1], &[0.0], 0.1).unwrap(), 1.0);
    }

    #[test]
    fn stat_sig_hand_confusion() {
        let pos = (0.1, 0.5);
        let neg = (-0.5, -0.1);
        let ns = (-0.1, 0.1);
        // gold -> pred pairs: 2 of 3 correct for each gold class.
        let golds = [pos, pos, pos, neg, neg, neg, ns, ns, ns];
        let preds = [pos, pos, ns, neg, neg, pos, ns, ns, neg];
        let s = stat_sig_scores(&preds, &golds).unwrap();
        // TP = 6, FP = FN = 3 => P = R = F1 = 6/9.
        assert!((s.micro_f1 - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(s.accuracy, 6.0 / 9.0);
        assert_eq!(stat_sig_f1(&[(0.2, 0.4)], &[(-0.101, 0.075)]).unwrap(), 0.0);
        assert!(matches!(stat_sig_f1(&[(0.4, 0.2)], &[(0.1, 0.2)]), Err(MetricError::MalformedInterval(_))));
    }

    #[test]
    fn ci_validity() {
        assert_eq!(ci_valid_rate(&[pred("a", 0.1, 0.0, 0.2)]).unwrap(), 1.0);
        assert_eq!(ci_valid_rate(&[pred("a", 0.1, 0.0, 0.2), pred("b", 0.1, 0.2, 0.0)]).unwrap(), 0.5);
    }

    #[test]
    fn hedges_examples() {
        let g = hedges_g(0.5, 0.0, 1.0, 50, 50).unwrap();
        assert!((g - 0.5 * (1.0 - 3.0 / 391.0)).abs() < 1e-12);
        assert_eq!(hedges_g(1.0, 1.0, 2.0, 2, 1).unwrap(), 0.0);
        assert_eq!(hedges_g(1.0, 0.0, 0.0, 10, 10), Err(MetricError::ZeroPooledSd));
        assert_eq!(hedges_g(1.0, 0.0, 1.0, 1, 1), Err(MetricError::DegenerateFreedom));
        let mut prev = f64::INFINITY;
        for n in 2..200u64 {
            let d = (hedges_j(n, n).unwrap() - 1.0).abs();
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn identity_evaluation() {
        let golds = [est("a", 0.3, Some((0.1, 0.5))), est("b", -0.2, Some((-0.4, -0.1))), est("c", 0.05, Some((-0.1, 0.2)))];
        let preds: Vec<_> = golds
            .iter()
            .map(|g| pred(&format!("{}-L0", g.estimate_id), g.effect_size, g.ci_lower.unwrap(), g.ci_upper.unwrap()))
            .collect();
        let r = evaluate(&preds, &[], &GoldTable::from_estimates(&golds), &EvalConfig::default()).unwrap();
        assert_eq!((r.rmse, r.mae, r.r2, r.direction_acc), (0.0, 0.0, Some(1.0), 1.0));
        assert_eq!((r.stat_sig_f1, r.ci_valid_rate), (Some(1.0), 1.0));
        assert_eq!((r.n_scored, r.n_excluded), (3, 0));
    }

    #[test]
    fn exclusions_are_counted() {
        let golds = [est("a", 0.3, Some((0.1, 0.5))), est("b", -0.2, Some((-0.4, -0.1)))];
        let preds = [pred("a-L0", 0.2, 0.1, 0.3), pred("zzz-L1", 0.2, 0.1, 0.3), pred("b-L0", 0.2, 0.3, 0.1)];
        let failures = [PredictionFailure {
            query_id: "b-L1".into(),
            predictor_id: "p".into(),
            message: "bad".into(),
            raw: None,
        }];
        let r = evaluate(&preds, &failures, &GoldTable::from_estimates(&golds), &EvalConfig::default()).unwrap();
        assert_eq!(r.n_scored, 1);
        assert_eq!(r.n_scored + r.n_excluded, preds.len() + failures.len());
        assert_eq!(r.exclusions[EXCLUDED_NO_GOLD], 1);
        assert_eq!(r.exclusions[EXCLUDED_INVALID_CI], 1);
        assert!(r.r2.is_none() && r.degeneracy_flags.contains(&"r2_undefined".to_string()));
        assert!(evaluate(&[pred("x-L0", 0.1, 0.0, 0.2)], &[], &GoldTable::from_estimates(&golds), &EvalConfig::default()).is_err());
    }

    #[test]
    fn ci_free_golds_drop_significance() {
        let golds = [est("aidgrade-001", 0.3, None), est("aidgrade-002", -0.1, None)];
        let preds = [pred("aidgrade-001-L3", 0.2, 0.1, 0.3), pred("aidgrade-002-L3", 0.0, -0.1, 0.1)];
        let r = evaluate(&preds, &[], &GoldTable::from_estimates(&golds), &EvalConfig::default()).unwrap();
        assert_eq!(r.stat_sig_f1, None);
        assert_eq!(r.n_missing_gold_ci, 2);
        let json: serde_json::Value = serde_json::from_str(&r.to_json_pretty()).unwrap();
        assert!(json["stat_sig_f1"].is_null());
    }

    #[test]
    fn serialization_rounds_to_four_places() {
        let golds = [est("a", 0.123456, Some((0.0, 0.3))), est("b", 0.0, Some((-0.1, 0.1)))];
        let preds = [pred("a", 0.0, -0.1, 0.1), pred("b", 0.0, -0.1, 0.1)];
        let r = evaluate(&preds, &[], &GoldTable::from_estimates(&golds), &EvalConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json_pretty()).unwrap();
        assert_eq!(v["mae"].as_f64().unwrap(), 0.0617);
        assert!(r.mae != 0.0617);
        let md = report_markdown("run", &r);
        assert!(md.starts_with("| Run | RMSE | MAE | R² | Pearson | Spearman | Direction | Econ. Sign. | Stat. Sign. |"));
        assert!(md.contains("n/a"));
    }

    fn vecs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..15).prop_flat_map(|n| {
            (
                proptest::collection::vec(-2.0f64..2.0, n),
                proptest::collection::vec(-2.0f64..2.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn permutation_invariance((p, g) in vecs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let gg: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
            prop_assert!((rmse(&p, &g).unwrap() - rmse(&pp, &gg).unwrap()).abs() < 1e-12);
            prop_assert!((mae(&p, &g).unwrap() - mae(&pp, &gg).unwrap()).abs() < 1e-12);
            prop_assert!((pearson(&p, &g).unwrap() - pearson(&pp, &gg).unwrap()).abs() < 1e-9);
            prop_assert!((spearman(&p, &g).unwrap() - spearman(&pp, &gg).unwrap()).abs() < 1e-9);
            prop_assert_eq!(direction_accuracy(&p, &g).unwrap(), direction_accuracy(&pp, &gg).unwrap());
        }

        #[test]
        fn orderings_and_ranges((p, g) in vecs(), c in -1.0f64..1.0) {
            prop_assert!(rmse(&p, &g).unwrap() >= mae(&p, &g).unwrap() - 1e-15);
            prop_assert!(r2(&p, &g).unwrap() <= 1.0);
            let shifted: Vec<f64> = p.iter().map(|x| x + c).collect();
            prop_assert!((mae(&shifted, &g).unwrap() - mae(&p, &g).unwrap()).abs() <= c.abs() + 1e-12);
            let d = direction_accuracy(&p, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            let scaled: Vec<f64> = p.iter().map(|x| 3.0 * x + 0.5).collect();
            prop_assert!((pearson(&scaled, &g).unwrap() - pearson(&p, &g).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn hedges_symmetries(mt in -5.0f64..5.0, mc in -5.0f64..5.0, sd in 0.1f64..5.0, k in 0.1f64..10.0, nt in 1u64..500, nc in 2u64..500) {
            let g = hedges_g(mt, mc, sd, nt, nc).unwrap();
            prop_assert!((g + hedges_g(mc, mt, sd, nt, nc).unwrap()).abs() < 1e-12);
            prop_assert!((g - hedges_g(k * mt, k * mc, k * sd, nt, nc).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn micro_f1_equals_accuracy(pairs in proptest::collection::vec(((-1.0f64..1.0, 0.01f64..1.0), (-1.0f64..1.0, 0.01f64..1.0)), 1..30)) {
            let preds: Vec<(f64, f64)> = pairs.iter().map(|((l, w), _)| (*l, l + w)).collect();
            let golds: Vec<(f64, f64)> = pairs.iter().map(|(_, (l, w))| (*l, l + w)).collect();
            let s = stat_sig_scores(&preds, &golds).unwrap();
            prop_assert!((s.micro_f1 - s.accuracy).abs() < 1e-12);
        }
    }
}
