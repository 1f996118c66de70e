//! `subtail`: generate long-tailed data, train, cluster and evaluate.

mod args;
mod commands;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use args::Command;
use outputs::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "subtail", version, about, arg_required_else_help = true, args_conflicts_with_subcommands = true)]
struct Cli {
    /// Replay every step recorded in a run manifest.
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

/// Caps the worker pool at `SUBTAIL_THREADS` when set.
fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("SUBTAIL_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .with_context(|| format!("SUBTAIL_THREADS={value:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let steps = match (cli.manifest, cli.command) {
        (Some(path), _) => RunManifest::load(&path)?.steps,
        (None, Some(command)) => vec![command],
        (None, None) => unreachable!("clap requires a subcommand or --manifest"),
    };
    for mut step in steps {
        step.resolve();
        commands::run(&step)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
