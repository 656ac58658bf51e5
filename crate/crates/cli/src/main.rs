//! `adacons`: run, sweep and compare semi-supervised transfer experiments.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Semi-supervised transfer learning experiments with AKC and ARC.
#[derive(Debug, Parser)]
#[command(name = "adacons", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train, imprint and fine-tune once.
    Run(Common),
    /// One sub-run per value of a single config axis, over every seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values. Threshold axes are fractions of ln C.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
    },
    /// Every baseline and regularizer combination across `n_labeled_grid`.
    Compare(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; falls back to $ADACONS_OUT, then to `out_dir` in the config.
    #[arg(long, env = "ADACONS_OUT")]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for independent sub-runs (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    EpsK,
    EpsR,
    NLabeled,
    LambdaR,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(c) => commands::load(&c).and_then(|(cfg, root)| commands::run(&cfg, &root)),
        Command::Sweep { common, axis, values } => commands::load(&common)
            .and_then(|(cfg, root)| commands::with_jobs(common.jobs, || commands::sweep(&cfg, &root, axis, &values))),
        Command::Compare(c) => {
            commands::load(&c).and_then(|(cfg, root)| commands::with_jobs(c.jobs, || commands::compare(&cfg, &root)))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
