//! `mvsnet` — one entry point for the whole pipeline: generate a synthetic
//! cohort, validate a manifest, plan folds, train with cross-validation, and
//! render reports.
//!
//! Exit codes are stable: 0 ok, 2 config/schema, 3 I/O, 4 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvsnet::Error;

#[derive(Parser)]
#[command(name = "mvsnet", version, about = "Multi-view fundus classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic multi-view cohort
    Synth {
        /// Path to a synthesis spec (JSON)
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for images, manifest.json, and truth.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a manifest: completion actions, exclusions, and the count table
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Build a patient-wise stratified fold plan
    Folds {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the fold plan (JSON)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run cross-validated training from a run config (JSON)
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Fold workers to run in parallel
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Override the master seed (the MVS_SEED env var wins over this)
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long, value_parser = ["binary", "multiclass"])]
        task: Option<String>,
        #[arg(long, value_parser = ["multi-view", "single-view"])]
        variant: Option<String>,
    },
    /// Render tables, confusion/ROC/curve data from a finished run
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Second run to compare against (emits radar.csv)
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Report directory (defaults to <run>/report)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter counts from the closed-form arithmetic
    Params {
        #[arg(long)]
        backbone: Option<String>,
        /// Per-view feature length override (tinyconv only)
        #[arg(long)]
        d_view: Option<usize>,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Print the whole registry
        #[arg(long, default_value_t = false)]
        all: bool,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::MissingFile(_) | Error::Io { .. } | Error::UnreadableImage { .. } => 3,
        Error::NonFiniteLoss { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out } => commands::synth(&spec, &out),
        Command::Validate { manifest } => commands::validate(&manifest),
        Command::Folds {
            manifest,
            k,
            seed,
            out,
        } => commands::folds(&manifest, k, seed, out.as_deref()),
        Command::Train {
            config,
            jobs,
            seed,
            out,
            max_epochs,
            task,
            variant,
        } => commands::train(commands::TrainArgs {
            config,
            jobs,
            seed,
            out,
            max_epochs,
            task,
            variant,
        }),
        Command::Report { run, compare, out } => {
            commands::report(&run, compare.as_deref(), out.as_deref())
        }
        Command::Params {
            backbone,
            d_view,
            views,
            classes,
            all,
        } => commands::params(backbone.as_deref(), d_view, views, classes, all),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
