//! Forecasting causal effects of policy interventions from natural-language
//! queries: corpus handling, LLM-backed query and synthetic-RCT generation,
//! predictors and evaluation.

pub mod dataset;
pub mod extract;
pub mod jsonl;
pub mod llm;
pub mod metrics;
pub mod predictors;
pub mod querygen;
pub mod stage;
pub mod synthrct;
pub mod template;
pub mod types;

pub use types::*;

#[cfg(feature = "mock")]
pub mod mock;
