// SPDX-License-Identifier: MIT OR Apache-2.0

//! `ctxprobe`: batch front-end for irrelevant-context experiments.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 NaN/Inf detected.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Ctx;
use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "ctxprobe", version, about = "Probe how irrelevant context changes factual answers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (.toml or .json).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set sampling.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Clear this command's existing outputs instead of resuming.
    #[arg(long)]
    overwrite: bool,
    /// Force single-threaded execution.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Q-only and C+Q passes, candidate classification, summary.
    Run(Common),
    /// Logit trajectories and top tokens per layer for selected run rows.
    Lens(Common),
    /// Noise-and-restore grids for selected run rows.
    Patch(Common),
    /// Last-token attention knockout for selected run rows.
    Knockout(Common),
    /// Context/candidate PMI per query class with a one-sample t-test.
    Pmi {
        #[command(flatten)]
        common: Common,
        /// Precomputed answer grids (JSON) instead of model runs.
        #[arg(long)]
        answers: Option<PathBuf>,
    },
    /// Seeded sample of context-based candidates for manual annotation.
    ExportAnnotations(Common),
    /// Write a synthetic checkpoint trained on a corpus.
    Synth {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        class_lists: PathBuf,
        /// `toy` or `gpt2_class`.
        #[arg(long, default_value = "gpt2_class")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ctx(c: &Common) -> Result<Ctx, CliError> {
    let cfg = RunConfig::load(&c.config, &c.overrides)?;
    Ok(Ctx::new(cfg, c.sequential, c.overwrite))
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run(c) => commands::run(&ctx(&c)?),
        Command::Lens(c) => commands::lens(&ctx(&c)?),
        Command::Patch(c) => commands::patch(&ctx(&c)?),
        Command::Knockout(c) => commands::knockout(&ctx(&c)?),
        Command::Pmi { common, answers } => commands::pmi(&ctx(&common)?, answers.as_deref()),
        Command::ExportAnnotations(c) => commands::export_annotations(&ctx(&c)?),
        Command::Synth { corpus, class_lists, preset, out } => commands::synth(&corpus, &class_lists, &preset, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
