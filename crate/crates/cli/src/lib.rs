//! Library side of the `rcmlab` command: configuration, experiment runners and output.

pub mod config;
pub mod experiments;
pub mod output;
pub mod plot;

use std::path::Path;

use serde_json::Value;

pub use config::{resolve, Config, Experiment, FieldError};
pub use experiments::{run, Outcome, RunError};

/// Resolves a config document, runs it and writes the results into `out`.
/// Returns whether every hard check passed.
pub fn execute(doc: Value, experiment: Option<Experiment>, overrides: &[String], out: &Path) -> Result<bool, RunError> {
    let cfg = resolve(doc, experiment, overrides).map_err(RunError::Validation)?;
    let outcome = run(&cfg)?;
    Ok(output::write_run(out, &cfg, &outcome)?)
}
