//! Command-line harness: configuration, run directories, checkpoints and
//! CSV output around `adaptlab-core`.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime errors.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod rundir;

pub use error::{CliError, Result};

use clap::{Parser, Subcommand};
use commands::{EvalArgs, LandscapeArgs, ParamsArgs, RsaArgs, RunArgs, SynthArgs, TaptArgs};

#[derive(Debug, Parser)]
#[command(
    name = "adaptlab",
    version,
    about = "Adapter tuning versus fine-tuning on small encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Supervised tuning with dev-based checkpoint selection.
    Train(RunArgs),
    /// Masked-LM pretraining on unlabeled task text.
    Tapt(TaptArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Per-layer representational similarity of two checkpoints.
    Rsa(RsaArgs),
    /// Loss along the line from initial to trained weights.
    Landscape(LandscapeArgs),
    /// Learning rate x seed grid.
    Sweep(RunArgs),
    /// Adapter parameter counts.
    Params(ParamsArgs),
    /// Generate a synthetic keyword classification task.
    Synth(SynthArgs),
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train(a) => commands::cmd_train(a),
        Command::Tapt(a) => commands::cmd_tapt(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Rsa(a) => commands::cmd_rsa(a),
        Command::Landscape(a) => commands::cmd_landscape(a),
        Command::Sweep(a) => commands::cmd_sweep(a),
        Command::Params(a) => commands::cmd_params(a),
        Command::Synth(a) => commands::cmd_synth(a),
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
