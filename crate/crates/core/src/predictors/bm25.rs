//! Okapi BM25 nearest-neighbour lookup over training queries. The prediction
//! is the triple attached to the single best-scoring document.

use std::collections::HashMap;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{MeanEffectModel, PredictError, Predictor, PredictorInput};
use crate::types::EffectPrediction;

/// Flag set on predictions that fell back to the training mean because the
/// query shared no indexed term.
pub const FALLBACK_FLAG: &str = "no_term_overlap";

pub const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "does", "do", "for", "from", "has", "have", "how", "in",
    "is", "it", "its", "of", "on", "or", "that", "the", "their", "this", "to", "was", "were", "what", "when",
    "which", "who", "will", "with",
];

/// Lowercase, replace non-alphanumerics with spaces, split, drop stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect();
    lowered
        .split_whitespace()
        .filter(|t| !STOPWORDS.contains(t))
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// One indexed training query and the gold triple it retrieves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Item {
    pub doc_id: String,
    pub text: String,
    pub level: Option<u8>,
    pub effect: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone)]
struct Doc {
    tf: HashMap<String, u32>,
    len: usize,
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    items: Vec<Bm25Item>,
    docs: Vec<Doc>,
    df: HashMap<String, u32>,
    avgdl: f64,
    fallback: MeanEffectModel,
}

pub fn build_bm25_index(items: Vec<Bm25Item>, params: Bm25Params) -> Result<Bm25Index, PredictError> {
    if items.is_empty() {
        return Err(PredictError::EmptyTraining);
    }
    let mut df: HashMap<String, u32> = HashMap::new();
    let docs: Vec<Doc> = items
        .iter()
        .map(|it| {
            let toks = tokenize(&it.text);
            let mut tf = HashMap::new();
            for t in &toks {
                *tf.entry(t.clone()).or_insert(0) += 1;
            }
            for t in tf.keys() {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
            Doc { tf, len: toks.len() }
        })
        .collect();
    let n = items.len() as f64;
    let avgdl = docs.iter().map(|d| d.len as f64).sum::<f64>() / n;
    let fallback = MeanEffectModel {
        mean_effect: items.iter().map(|i| i.effect).sum::<f64>() / n,
        mean_ci_lower: items.iter().map(|i| i.ci_lower).sum::<f64>() / n,
        mean_ci_upper: items.iter().map(|i| i.ci_upper).sum::<f64>() / n,
        n_train: items.len(),
    };
    Ok(Bm25Index {
        params,
        items,
        docs,
        df,
        avgdl,
        fallback,
    })
}

impl Bm25Index {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Bm25Item] {
        &self.items
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.items.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Score of every document; repeated query terms count repeatedly.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let terms = tokenize(query);
        let Bm25Params { k1, b } = self.params;
        self.docs
            .iter()
            .map(|d| {
                let norm = if self.avgdl > 0.0 {
                    1.0 - b + b * d.len as f64 / self.avgdl
                } else {
                    1.0
                };
                terms
                    .iter()
                    .map(|t| {
                        let f = d.tf.get(t).copied().unwrap_or(0) as f64;
                        if f == 0.0 {
                            0.0
                        } else {
                            self.idf(t) * f * (k1 + 1.0) / (f + k1 * norm)
                        }
                    })
                    .sum()
            })
            .collect()
    }

    fn has_overlap(&self, query: &str) -> bool {
        tokenize(query).iter().any(|t| self.df.contains_key(t))
    }

    /// Index of the best document among candidates, lowest ordinal on ties.
    /// Candidates are the documents at `level` when any exist, else all.
    pub fn top1(&self, query: &str, level: Option<u8>) -> usize {
        let scores = self.scores(query);
        let same_level = |i: &usize| level.is_none_or(|l| self.items[*i].level == Some(l));
        let restricted: Vec<usize> = (0..self.items.len()).filter(same_level).collect();
        let candidates: Vec<usize> = if restricted.is_empty() {
            (0..self.items.len()).collect()
        } else {
            restricted
        };
        let mut best = candidates[0];
        for &i in &candidates[1..] {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        best
    }
}

pub fn retrieval_lookup(index: &Bm25Index, predictor_id: &str, input: &PredictorInput) -> Result<EffectPrediction, PredictError> {
    input.check()?;
    let pred = if index.has_overlap(&input.text) {
        let hit = &index.items[index.top1(&input.text, input.level)];
        EffectPrediction {
            query_id: input.query_id.clone(),
            predictor_id: predictor_id.to_string(),
            effect: hit.effect,
            ci_lower: hit.ci_lower,
            ci_upper: hit.ci_upper,
            flags: Vec::new(),
        }
    } else {
        EffectPrediction {
            query_id: input.query_id.clone(),
            predictor_id: predictor_id.to_string(),
            effect: index.fallback.mean_effect,
            ci_lower: index.fallback.mean_ci_lower,
            ci_upper: index.fallback.mean_ci_upper,
            flags: vec![FALLBACK_FLAG.to_string()],
        }
    };
    Ok(pred.ensure_valid()?)
}

#[derive(Debug, Clone)]
pub struct RetrievalPredictor {
    id: String,
    index: Bm25Index,
}

impl RetrievalPredictor {
    pub fn new(id: impl Into<String>, index: Bm25Index) -> Self {
        Self { id: id.into(), index }
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }
}

#[async_trait]
impl Predictor for RetrievalPredictor {
    fn id(&self) -> &str {
        &self.id
    }

    async fn predict(&self, input: &PredictorInput) -> Result<EffectPrediction, PredictError> {
        retrieval_lookup(&self.index, &self.id, input)
    }
}
