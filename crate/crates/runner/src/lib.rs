//! Command-line pipeline runner: staged, resumable evaluation runs plus
//! cross-run comparison tables.

pub mod cli;
pub mod compare;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use error::RunError;
pub use pipeline::{run, run_with_client, RunOutcome};
