//! Config-driven experiment runner: reads one JSON document, runs it, and
//! writes `results.csv` and `manifest.json` into the output directory.

pub mod config;
pub mod error;
pub mod run;
pub mod table;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

pub use config::{Experiment, ExperimentConfig, DEFAULT_SEED};
pub use error::{Category, CliError};
pub use run::{run_experiment, Outcome};
pub use table::{Cell, Table};

/// Bumped whenever a kind's CSV columns change.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_OUTPUT: &str = "lsa-out";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
}

/// Seed precedence: `--seed`, then the config, then [`DEFAULT_SEED`].
pub fn resolve_seed(flag: Option<u64>, config: &ExperimentConfig) -> u64 {
    flag.or(config.seed).unwrap_or(DEFAULT_SEED)
}

/// Runs `config` on a pool of `threads` workers (0 = rayon default).
pub fn run_with_threads(config: &ExperimentConfig, seed: u64, threads: usize) -> Result<Outcome, CliError> {
    if threads == 0 {
        return run_experiment(&config.experiment, &config.base_dir, seed);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::io(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment(&config.experiment, &config.base_dir, seed))
}

/// Output directory: `--out`, then the config's `output` (relative to the
/// config file), then [`DEFAULT_OUTPUT`].
pub fn output_dir(flag: Option<&Path>, config: Option<&ExperimentConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match config.and_then(|c| c.output.as_ref().map(|o| c.base_dir.join(o))) {
        Some(p) => p,
        None => PathBuf::from(DEFAULT_OUTPUT),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn manifest(config: &ExperimentConfig, seed: u64, threads: usize, outcome: &Outcome) -> Value {
    json!({
        "tool": "lsa",
        "version": env!("CARGO_PKG_VERSION"),
        "kind": config.experiment.kind(),
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "columns": outcome.table.columns,
        "rows": outcome.table.rows.len(),
        "seed": seed,
        "threads": threads,
        "config": config.raw,
        "summary": outcome.summary,
        "created_unix_seconds": unix_seconds(),
    })
}

pub fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    seed: u64,
    threads: usize,
    outcome: &Outcome,
) -> Result<(), CliError> {
    create_dir(dir)?;
    write(&dir.join("results.csv"), &outcome.table.to_csv())?;
    let text = serde_json::to_string_pretty(&manifest(config, seed, threads, outcome))
        .map_err(|e| CliError::io(e.to_string()))?;
    write(&dir.join("manifest.json"), &(text + "\n"))
}

/// Machine-readable failure record, written as `error.json`.
pub fn write_error(dir: &Path, err: &CliError) -> Result<(), CliError> {
    create_dir(dir)?;
    let record = json!({
        "status": "error",
        "category": err.category,
        "exit_code": err.exit_code(),
        "message": err.message,
    });
    write(&dir.join("error.json"), &(record.to_string() + "\n"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub outcome: Outcome,
}

/// Loads, runs and writes. On failure an `error.json` is left in the output
/// directory when one can be determined and created.
pub fn execute(opts: &RunOptions) -> Result<Report, CliError> {
    let config = match ExperimentConfig::load(&opts.config) {
        Ok(c) => c,
        Err(e) => {
            let _ = write_error(&output_dir(opts.out.as_deref(), None), &e);
            return Err(e);
        }
    };
    let out_dir = output_dir(opts.out.as_deref(), Some(&config));
    let seed = resolve_seed(opts.seed, &config);
    let result = run_with_threads(&config, seed, opts.threads)
        .and_then(|outcome| write_outputs(&out_dir, &config, seed, opts.threads, &outcome).map(|_| outcome));
    match result {
        Ok(outcome) => {
            let _ = std::fs::remove_file(out_dir.join("error.json"));
            Ok(Report { out_dir, seed, outcome })
        }
        Err(e) => {
            let _ = write_error(&out_dir, &e);
            Err(e)
        }
    }
}
