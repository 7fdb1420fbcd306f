//! `cxrlab` command-line harness.
//!
//! Subcommands: synth, train, eval, sweep, params, saliency. Exit codes:
//! 0 success, 1 usage/configuration error, 2 runtime failure.

mod commands;
mod config;
mod svg;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cxrlab",
    version,
    about = "Multi-label chest-radiograph-style classification experiments: \
             CNNs vs vision transformers with knowledge distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PGM images + manifest CSV)
    Synth(commands::synth::SynthArgs),
    /// Train one model on one fold
    Train(commands::train::TrainArgs),
    /// Evaluate a checkpoint on the plan's test split
    Eval(commands::eval::EvalArgs),
    /// Train/evaluate across the (model x fraction x fold) grid
    Sweep(commands::sweep::SweepArgs),
    /// Print trainable parameter counts for model presets
    Params(commands::params::ParamsArgs),
    /// Export a saliency map for one image
    Saliency(commands::saliency::SaliencyArgs),
}

/// Die quietly on a closed pipe (`cxrlab params | head`) like other Unix
/// tools instead of panicking on the failed write.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
        Command::Params(args) => commands::params::run(args),
        Command::Saliency(args) => commands::saliency::run(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code_for(&e));
        }
    }
}

fn exit_code_for(e: &cxrlab_core::Error) -> i32 {
    use cxrlab_core::Error;
    match e {
        Error::Config(_) | Error::Contract(_) => 1,
        _ => 2,
    }
}
