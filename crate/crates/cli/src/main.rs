mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{EvalFlags, GenerateOverrides, TrainOverrides};
use config::DataOverrides;

/// Multi-task ads and promotions targeting: data, training, evaluation and experiments.
///
/// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training divergence,
/// 4 experiment arm failure.
#[derive(Parser, Debug)]
#[command(name = "castmtl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world and write train/val/test impressions plus the show catalog.
    Generate {
        /// TOML config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: GenerateOverrides,
    },
    /// Train a model on a generated data directory and save the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding train.jsonl and val.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Compute per-task AP and segment metrics for a model on an impression file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Impression file (JSON lines).
        #[arg(long)]
        data: PathBuf,
        /// Show catalog file (JSON lines).
        #[arg(long)]
        catalog: PathBuf,
        /// Report file to write (JSON); a text table is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: EvalFlags,
    },
    /// Train every arm of an ablation spec over its seeds and report AP against the baseline.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: DataOverrides,
    },
    /// Paired replay of a baseline and a candidate model over shared opportunity streams.
    Replay {
        #[arg(long)]
        spec: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: DataOverrides,
    },
    /// Print a model's configuration and parameter statistics.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Generate { config, out, overrides } => commands::cmd_generate(config.as_deref(), out, overrides),
        Command::Train {
            config,
            data,
            out,
            overrides,
        } => commands::cmd_train(config.as_deref(), data, out, overrides),
        Command::Eval {
            model,
            data,
            catalog,
            out,
            flags,
        } => commands::cmd_eval(model, data, catalog, out, flags),
        Command::Ablate { spec, out, overrides } => commands::cmd_ablate(spec, out, overrides),
        Command::Replay { spec, out, overrides } => commands::cmd_replay(spec, out, overrides),
        Command::Inspect { model } => commands::cmd_inspect(model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
