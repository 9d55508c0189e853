//! `spear`: run pipelines, inspect prompt histories and run the benchmark suites.
//!
//! Exit codes: 0 on success, 1 when a program or pipeline fails, 2 on usage errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "spear", version, about = "Structured prompt pipelines: run, inspect and benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by commands that build a backend.
#[derive(clap::Args, Debug, Clone)]
struct RuntimeArgs {
    /// Configuration file: TOML when it ends in .toml, JSON otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Allow the HTTP backend; without it only the mock and scripted backends run.
    #[arg(long)]
    live: bool,
    /// Seed for corpus generation.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute one pipeline of a program.
    Run {
        /// Program files, merged into one namespace.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Pipeline to run; optional when the program declares exactly one.
        #[arg(long)]
        pipeline: Option<String>,
        #[command(flatten)]
        runtime: RuntimeArgs,
        /// Prompt store file, loaded before and saved after the run. Its prefix
        /// cache persists next to it as `<store>.cache.json`.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Apply the fusion planner before running.
        #[arg(long)]
        optimize: bool,
        /// Run without committing prompt-store writes.
        #[arg(long)]
        shadow: bool,
        /// Report file; the report goes to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also stream events as JSON lines to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a benchmark suite and print its table.
    Bench {
        suite: Suite,
        #[command(flatten)]
        runtime: RuntimeArgs,
        /// Directory for the CSV and JSON results.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate programs, printing diagnostics.
    Check {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Print programs in canonical form.
    Fmt {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Rewrite the files in place.
        #[arg(long, conflicts_with = "check")]
        write: bool,
        /// Exit with status 1 when a file is not in canonical form.
        #[arg(long)]
        check: bool,
    },
    /// Show a prompt entry and its refinement history.
    Inspect {
        #[arg(long)]
        store: PathBuf,
        /// Prompt key or `key@version`.
        key: String,
        #[arg(long)]
        json: bool,
    },
    /// Compare two prompt entries or versions.
    Diff {
        #[arg(long)]
        store: PathBuf,
        left: String,
        right: String,
    },
    /// Rebuild entries from their ref_logs and compare with the stored ones.
    Replay {
        #[arg(long)]
        store: PathBuf,
        /// Keys to replay; all entries when absent.
        keys: Vec<String>,
    },
    /// Aggregate refiner statistics over run reports.
    Stats {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Suite {
    RefinementModes,
    FusionSelectivity,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Table,
    Csv,
    Json,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
