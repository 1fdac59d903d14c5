use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rcmlab::plot::{plot_data, PlotError};
use rcmlab::{execute, Experiment, RunError};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "rcmlab", version, about = "Numerical experiments for long-range random walks in random conductances")]
struct Cli {
    /// Worker threads (defaults to RCMLAB_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Re-run the config recorded in a manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write tidy plot tables into a finished run directory.
    PlotData { dir: PathBuf },
    /// `<experiment> --config <file> [--set key=value]... --out <dir>`
    #[command(external_subcommand)]
    Experiment(Vec<String>),
}

/// Arguments of an experiment run.
#[derive(Parser)]
#[command(name = "rcmlab")]
struct RunArgs {
    experiment: Experiment,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set params.nsamples=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

const EXIT_FAIL: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_RESOURCE: u8 = 3;

fn read_json(path: &Path) -> Result<Value, RunError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        RunError::Validation(vec![rcmlab::FieldError::new("config", format!("{}: {e}", path.display()))])
    })
}

fn report(result: Result<bool, RunError>) -> ExitCode {
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more hard checks failed; see summary.json");
            ExitCode::from(EXIT_FAIL)
        }
        Err(RunError::Validation(errors)) => {
            println!("{}", json!({ "errors": errors }));
            ExitCode::from(EXIT_INVALID)
        }
        Err(e @ RunError::Resource(_)) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_RESOURCE)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_FAIL)
        }
    }
}

fn thread_pool(n: Option<usize>) -> Result<(), ExitCode> {
    let n = n.or_else(|| std::env::var("RCMLAB_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| {
            eprintln!("thread pool: {e}");
            ExitCode::from(EXIT_FAIL)
        })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut threads = cli.threads;
    let command = match cli.command {
        Command::Experiment(args) => {
            let run = RunArgs::parse_from(std::iter::once("rcmlab".to_string()).chain(args));
            threads = run.threads.or(threads);
            if let Err(code) = thread_pool(threads) {
                return code;
            }
            let doc = match run.config {
                Some(p) => read_json(&p),
                None => Ok(json!({ "environment": {} })),
            };
            return report(doc.and_then(|d| execute(d, Some(run.experiment), &run.overrides, &run.out)));
        }
        other => other,
    };
    if let Err(code) = thread_pool(threads) {
        return code;
    }
    match command {
        Command::Experiment(_) => unreachable!(),
        Command::Rerun { manifest, out } => {
            let doc = read_json(&manifest).and_then(|m| {
                m.get("config")
                    .cloned()
                    .ok_or_else(|| RunError::Validation(vec![rcmlab::FieldError::new("config", "manifest has no config")]))
            });
            report(doc.and_then(|d| execute(d, None, &[], &out)))
        }
        Command::PlotData { dir } => match plot_data(&dir) {
            Ok(files) => {
                for f in files {
                    println!("{}", dir.join(f).display());
                }
                ExitCode::SUCCESS
            }
            Err(PlotError::Missing(m)) => {
                println!("{}", json!({ "missing": m }));
                ExitCode::from(EXIT_INVALID)
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(EXIT_FAIL)
            }
        },
    }
}
