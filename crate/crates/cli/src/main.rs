//! `ape`: command-line front end for training and evaluating alignment
//! heads over precomputed embedding shards.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure.

mod eval_cmd;
mod gen;
mod misc;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ape_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "ape", version, about = "Train and evaluate alignment heads on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test shard pair and a manifest.
    GenSynthetic(gen::GenArgs),
    /// Print the header, checksum status and field statistics of shards.
    InspectShard(misc::InspectArgs),
    /// Train a head from a config file.
    Train(run::TrainArgs),
    /// Continue an interrupted run from its last checkpoint.
    Resume(run::ResumeArgs),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(eval_cmd::EvalCommand),
    /// Exact parameter counts of a head architecture.
    CountParams(misc::CountArgs),
    /// Flatten a metrics log into CSV.
    ExportCsv(misc::CsvArgs),
    /// Train every point of a hyperparameter grid in child processes.
    Sweep(run::SweepArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map(Error::kind);
    match kind {
        Some(ErrorKind::Config) => 1,
        Some(ErrorKind::Data) | None => 2,
        Some(ErrorKind::Numeric) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenSynthetic(a) => gen::run(a),
        Command::InspectShard(a) => misc::inspect(a),
        Command::Train(a) => run::train(a),
        Command::Resume(a) => run::resume(a),
        Command::Eval(c) => eval_cmd::run(c),
        Command::CountParams(a) => misc::count_params(a),
        Command::ExportCsv(a) => misc::export_csv(a),
        Command::Sweep(a) => run::sweep(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
