//! Writes run artefacts. Nothing written depends on wall-clock time or paths,
//! so identical configs give byte-identical directories.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Config;
use crate::experiments::{Check, Outcome, Table};

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.json";
pub const RESULTS: &str = "results.json";

fn write_json(path: &Path, v: &impl Serialize) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(std::io::Error::other)?;
    s.push('\n');
    fs::write(path, s)
}

pub fn write_table(dir: &Path, t: &Table) -> std::io::Result<String> {
    let file = format!("{}.csv", t.name);
    let mut w = csv::Writer::from_path(dir.join(&file))?;
    w.write_record(&t.header)?;
    for row in &t.rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(file)
}

pub fn overall_pass(checks: &[Check]) -> bool {
    checks.iter().filter(|c| c.hard).all(|c| c.pass)
}

/// Writes everything and returns whether all hard checks passed.
pub fn write_run(dir: &Path, cfg: &Config, out: &Outcome) -> std::io::Result<bool> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for t in &out.tables {
        files.push(write_table(dir, t)?);
    }
    write_json(&dir.join(RESULTS), &out.results)?;
    let pass = overall_pass(&out.checks);
    let summary = json!({
        "experiment": cfg.experiment.name(),
        "pass": pass,
        "checks": out.checks,
        "notes": out.notes,
    });
    write_json(&dir.join(SUMMARY), &summary)?;
    files.push(RESULTS.to_string());
    files.push(SUMMARY.to_string());
    write_json(&dir.join(MANIFEST), &manifest(cfg, &files))?;
    Ok(pass)
}

pub fn manifest(cfg: &Config, files: &[String]) -> Value {
    json!({
        "tool": "rcmlab",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment.name(),
        "seeds": {"environment": cfg.environment.seeds, "monte_carlo": cfg.seed},
        "config": cfg,
        "files": files,
    })
}
