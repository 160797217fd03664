mod commands;
mod options;

use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use mmpipe_core::{Error, ErrorKind};

use commands::{DiffArgs, MergeArgs, PackArgs, PlanArgs, SearchArgs, StatsArgs};

#[derive(Parser)]
#[command(name = "mmpipe", version, about = "Multimodal training data pipeline tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shard a manifest across data-parallel ranks
    Plan(PlanArgs),
    /// Pack one rank's shard into fixed-length sequences
    Pack(PackArgs),
    /// Continue an interrupted `pack` from its tracker state
    Resume(PackArgs),
    /// Average checkpoint containers
    Merge(MergeArgs),
    /// Per-tensor differences between two containers
    Diff(DiffArgs),
    /// Grid search over (min_pixels, max_pixels) with an external scorer
    Search(SearchArgs),
    /// Fill statistics for a pack file or a manifest
    Stats(StatsArgs),
}

const EXIT_USAGE: u8 = 1;

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Io => 3,
        ErrorKind::StateMismatch => 4,
    }
}

fn kind_name(e: &Error) -> &'static str {
    match e.kind() {
        ErrorKind::Validation => "validation",
        ErrorKind::Io => "io",
        ErrorKind::StateMismatch => "state_mismatch",
    }
}

fn run(cli: Cli) -> mmpipe_core::Result<()> {
    match cli.command {
        Command::Plan(args) => commands::plan(&args),
        Command::Pack(args) => commands::pack(&args, false),
        Command::Resume(args) => commands::pack(&args, true),
        Command::Merge(args) => commands::merge(&args),
        Command::Diff(args) => commands::diff(&args),
        Command::Search(args) => commands::search(&args),
        Command::Stats(args) => commands::stats(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = e.kind().as_str().unwrap_or("invalid arguments");
            eprintln!(
                "{}",
                json!({ "error": "usage", "code": EXIT_USAGE, "message": message })
            );
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!(
                "{}",
                json!({ "error": kind_name(&e), "code": code, "message": e.to_string() })
            );
            ExitCode::from(code)
        }
    }
}
