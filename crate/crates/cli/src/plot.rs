//! Reshapes a finished run directory into tidy CSV for plotting.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::output::MANIFEST;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("missing inputs: {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("malformed input {file}: {reason}")]
    Malformed { file: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

struct Csv {
    file: String,
    cols: HashMap<String, usize>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path, file: &str) -> Result<Csv, PlotError> {
        let bad = |e: csv::Error| PlotError::Malformed { file: file.into(), reason: e.to_string() };
        let mut r = csv::Reader::from_path(path.join(file)).map_err(bad)?;
        let cols = r.headers().map_err(bad)?.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<Result<_, _>>()
            .map_err(bad)?;
        Ok(Csv { file: file.into(), cols, rows })
    }

    fn col(&self, name: &str) -> Result<usize, PlotError> {
        self.cols
            .get(name)
            .copied()
            .ok_or_else(|| PlotError::Malformed { file: self.file.clone(), reason: format!("no column `{name}`") })
    }

    /// Selected columns of every row, in order.
    fn select(&self, names: &[&str]) -> Result<Vec<Vec<&str>>, PlotError> {
        let idx = names.iter().map(|n| self.col(n)).collect::<Result<Vec<_>, _>>()?;
        Ok(self.rows.iter().map(|r| idx.iter().map(|&i| r[i].as_str()).collect()).collect())
    }
}

/// Tidy series: (series, x, y, stderr).
type Tidy = Vec<(String, String, String, String)>;

fn series(c: &Csv, name: impl Fn(&[&str]) -> String, cols: &[&str], x: &str, y: &str, se: Option<&str>, out: &mut Tidy) -> Result<(), PlotError> {
    let mut all = cols.to_vec();
    all.extend([x, y]);
    if let Some(s) = se {
        all.push(s);
    }
    let k = cols.len();
    for r in c.select(&all)? {
        let stderr = if se.is_some() { r[k + 2].to_string() } else { String::new() };
        out.push((name(&r[..k]), r[k].to_string(), r[k + 1].to_string(), stderr));
    }
    Ok(())
}

fn inputs(experiment: &str) -> &'static [&'static str] {
    match experiment {
        "assumptions" => &["assumptions.csv"],
        "heat-kernel" => &["heat_kernel.csv"],
        "bounds-check" => &["bounds.csv"],
        "exit-times" => &["exit_times.csv"],
        "dynkin-hunt" => &["dynkin_hunt.csv"],
        "levy-system" => &["levy_system.csv"],
        "green" => &["green.csv"],
        "harnack" => &["harnack.csv", "harnack_median.csv"],
        "ehi-condition" => &["ehi_condition.csv"],
        "trap-return" => &["trap.csv"],
        "llt" => &["llt.csv", "llt_median.csv"],
        _ => &[],
    }
}

fn write_csv(dir: &Path, file: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), PlotError> {
    let mut w = csv::Writer::from_path(dir.join(file)).map_err(std::io::Error::from)?;
    w.write_record(header).map_err(std::io::Error::from)?;
    for r in rows {
        w.write_record(&r).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `plot_data.csv` (plus reshaped bounds/LLT tables) and returns the files written.
pub fn plot_data(dir: &Path) -> Result<Vec<String>, PlotError> {
    let mpath = dir.join(MANIFEST);
    if !mpath.is_file() {
        return Err(PlotError::Missing(vec![MANIFEST.into()]));
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(&mpath)?)
        .map_err(|e| PlotError::Malformed { file: MANIFEST.into(), reason: e.to_string() })?;
    let experiment = manifest["experiment"].as_str().unwrap_or_default().to_string();
    let needed = inputs(&experiment);
    if needed.is_empty() {
        return Err(PlotError::Malformed { file: MANIFEST.into(), reason: format!("unknown experiment `{experiment}`") });
    }
    let missing: Vec<String> = needed.iter().filter(|f| !dir.join(f).is_file()).map(|f| f.to_string()).collect();
    if !missing.is_empty() {
        return Err(PlotError::Missing(missing));
    }
    let main = Csv::read(dir, needed[0])?;
    let mut tidy = Tidy::new();
    let mut written = Vec::new();
    match experiment.as_str() {
        "assumptions" => {
            series(&main, |k| format!("hk2_seed{}_R{}", k[0], k[1]), &["seed", "big_r"], "r", "hk2", None, &mut tidy)?;
            series(&main, |k| format!("hk3_seed{}_R{}", k[0], k[1]), &["seed", "big_r"], "r", "hk3", None, &mut tidy)?;
        }
        "heat-kernel" => {
            series(&main, |k| format!("p_seed{}_t{}", k[0], k[1]), &["seed", "t"], "rho", "p", None, &mut tidy)?;
            series(&main, |k| format!("phi_t{}", k[0]), &["t"], "rho", "phi", None, &mut tidy)?;
        }
        "bounds-check" => {
            series(&main, |k| format!("ratio_seed{}_t{}", k[0], k[1]), &["seed", "t"], "rho", "ratio", None, &mut tidy)?;
            let rows = main.select(&["t", "rho", "p", "phi", "ratio"])?;
            write_csv(dir, "plot_bounds.csv", &["t", "rho", "p", "phi", "ratio"], rows.into_iter().map(|r| r.into_iter().map(String::from).collect()))?;
            written.push("plot_bounds.csv".to_string());
        }
        "exit-times" => {
            series(&main, |k| format!("mean_exit_seed{}", k[0]), &["seed"], "r", "mean", Some("stderr"), &mut tidy)?;
        }
        "dynkin-hunt" => {
            series(&main, |k| format!("residual_seed{}", k[0]), &["seed"], "target", "residual", Some("stderr"), &mut tidy)?;
        }
        "levy-system" => {
            series(&main, |k| format!("residual_{}_seed{}", k[1], k[0]), &["seed", "function"], "seed", "residual", Some("stderr"), &mut tidy)?;
        }
        "green" => {
            series(&main, |k| format!("green_seed{}", k[0]), &["seed"], "rho", "g", None, &mut tidy)?;
        }
        "harnack" => {
            series(&main, |k| format!("ehi_seed{}", k[0]), &["seed"], "r", "max_ehi", None, &mut tidy)?;
            series(&main, |k| format!("wehi_seed{}", k[0]), &["seed"], "r", "max_wehi", None, &mut tidy)?;
            let med = Csv::read(dir, needed[1])?;
            series(&med, |_| "median_ehi".into(), &[], "r", "median_ehi", None, &mut tidy)?;
            series(&med, |_| "median_wehi".into(), &[], "r", "median_wehi", None, &mut tidy)?;
        }
        "ehi-condition" => {
            series(&main, |k| format!("max_ratio_seed{}", k[0]), &["seed"], "k", "max_ratio", None, &mut tidy)?;
        }
        "trap-return" => {
            series(&main, |k| format!("scaled_n{}", k[0]), &["n"], "level", "scaled", None, &mut tidy)?;
        }
        "llt" => {
            series(&main, |k| format!("sup_error_seed{}", k[0]), &["seed"], "n", "sup_error", None, &mut tidy)?;
            let med = Csv::read(dir, needed[1])?;
            series(&med, |_| "median_sup_error".into(), &[], "n", "median_sup_error", None, &mut tidy)?;
            let rows = main.select(&["n", "seed", "sup_error"])?;
            write_csv(dir, "plot_llt.csv", &["n", "seed", "sup_error"], rows.into_iter().map(|r| r.into_iter().map(String::from).collect()))?;
            written.push("plot_llt.csv".to_string());
        }
        _ => unreachable!(),
    }
    write_csv(
        dir,
        "plot_data.csv",
        &["experiment", "series", "x", "y", "stderr"],
        tidy.into_iter().map(|(s, x, y, e)| vec![experiment.clone(), s, x, y, e]),
    )?;
    written.insert(0, "plot_data.csv".to_string());
    Ok(written)
}
