//! `mabn`: train, check, and benchmark the normalization variants.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Failure;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::VerifyTheorem(a) => commands::verify_theorem(a),
        Command::Bench(a) => commands::bench(a),
        Command::StatsTrace(a) => commands::stats_trace(a),
        Command::Fold(a) => commands::fold(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            let usage = matches!(e, mabn_core::Error::Config(_));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
