//! Experiment runner for the `fppg` library: simulate noisy dynamic
//! sinograms, reconstruct them with every configured method, score the
//! images against the phantom truth, fit kinetic models and aggregate over
//! noise realizations.
//!
//! Each stage reads and writes files under the run's output directory (see
//! [`artifacts`]), so stages can be rerun independently.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod sweep;

pub use config::{ConfigError, Method, RunConfig};
pub use error::CliError;
pub use pipeline::{Overrides, Pipeline, Stage};

use std::path::Path;

/// Loads `config_path`, applies `overrides` and runs `stage`.
pub fn run_pipeline(
    config_path: &Path,
    stage: Stage,
    overrides: &Overrides,
) -> Result<pipeline::RunSummary, CliError> {
    Pipeline::from_path(config_path, overrides)?.run(stage)
}
