//! `issf` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

mod ablate;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Usage;

#[derive(Parser, Debug)]
#[command(name = "issf", version, about = "Weakly-supervised temporal action localization")]
struct Cli {
    /// Run config (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the run config (and of the synthetic spec for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for ablation cells; 0 picks the core count.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Print the full default config (or synthetic spec with `synth`) and exit.
    #[arg(long, global = true)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and print its manifest path.
    Synth {
        /// Synthetic spec (TOML); defaults apply to missing keys.
        spec: Option<PathBuf>,
    },
    /// Train a model; writes `model.ckpt` and appends to `train_log.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint (or a proposal file) on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "proposals", required_unless_present = "proposals")]
        checkpoint: Option<PathBuf>,
        /// Evaluate these proposals instead of running a model.
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate every cell of a parameter grid.
    Ablate { grid: PathBuf },
    /// Per-pair difference values and per-snippet action scores of one video.
    ExportDiff {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let globals = commands::Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
    };
    if cli.print_defaults {
        print!(
            "{}",
            commands::defaults_text(matches!(cli.command, Some(Command::Synth { .. })))?
        );
        return Ok(());
    }
    match cli.command {
        None => Err(Usage::new("a command is required (see --help)").into()),
        Some(Command::Synth { spec }) => commands::synth(&globals, spec.as_deref()),
        Some(Command::Train { data }) => commands::train(&globals, &data),
        Some(Command::Eval {
            data,
            checkpoint,
            proposals,
            split,
        }) => commands::eval(&globals, &data, checkpoint.as_deref(), proposals.as_deref(), &split),
        Some(Command::Ablate { grid }) => ablate::run(&globals, &grid),
        Some(Command::ExportDiff {
            data,
            video,
            checkpoint,
        }) => commands::export_diff(&globals, &data, &video, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if commands::is_usage(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
