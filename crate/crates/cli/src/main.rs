use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lsa_cli::{execute, RunOptions};

/// Run one linear stochastic approximation experiment from a JSON config.
#[derive(Debug, Parser)]
#[command(name = "lsa", version)]
struct Args {
    /// Experiment document.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for results.csv and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for automatic.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let opts = RunOptions {
        config: args.config,
        seed: args.seed,
        out: args.out,
        threads: args.threads,
    };
    match execute(&opts) {
        Ok(report) => {
            if !args.quiet {
                println!(
                    "{} rows written to {} (seed {})",
                    report.outcome.table.rows.len(),
                    report.out_dir.join("results.csv").display(),
                    report.seed
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lsa: {}", e.message);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
