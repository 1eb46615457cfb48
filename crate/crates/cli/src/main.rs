//! `kvprune` command line: segment traces, score attention dumps, build
//! eviction plans, run tiny-model experiments and summarize their records.
//!
//! Exit codes: 0 success, 2 input error, 3 runtime failure.

mod commands;
mod experiment;
mod io;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::io::CliError;

#[derive(Debug, Parser)]
#[command(name = "kvprune", version, about = "Step-aware KV-cache eviction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a trace's reasoning region into marker-delimited steps.
    Segment(SegmentArgs),
    /// Turn an attention dump into token scores and a step-score table.
    Score(ScoreArgs),
    /// Build an eviction plan from scores or a dump.
    Plan(PlanArgs),
    /// Run the tiny decoder over a policy x budget x seed grid.
    Run(experiment::RunArgs),
    /// Summarize run records as markdown and CSV.
    Report(ReportArgs),
    /// Write the tiny model's weights for a seed.
    Weights(WeightsArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory; without it results go to stdout.
    #[arg(long, env = "KVPRUNE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Marker phrases: a JSON array of strings or one phrase per line.
    #[arg(long)]
    markers: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    markers: Option<PathBuf>,
    /// Most recent trace tokens that are never scored.
    #[arg(long, default_value_t = 0)]
    recent: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Score JSON as written by `score`.
    #[arg(long, conflicts_with = "dump", required_unless_present = "dump")]
    scores: Option<PathBuf>,
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    markers: Option<PathBuf>,
    #[arg(long, default_value = "ours")]
    policy: String,
    /// Tokens to evict per (layer, head).
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    recent: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Record files, or directories holding them.
    records: Vec<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct WeightsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Destination file.
    #[arg(long)]
    file: PathBuf,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Segment(a) => commands::segment(&a.trace, a.markers.as_deref(), a.common.out.as_deref()),
        Command::Score(a) => commands::score(&a.trace, &a.dump, a.markers.as_deref(), a.recent, a.common.out.as_deref()),
        Command::Plan(a) => commands::plan(commands::PlanRequest {
            trace: &a.trace,
            scores: a.scores.as_deref(),
            dump: a.dump.as_deref(),
            markers: a.markers.as_deref(),
            policy: &a.policy,
            budget: a.budget,
            seed: a.seed,
            recent: a.recent,
            out: a.common.out.as_deref(),
        }),
        Command::Run(a) => experiment::run(&a),
        Command::Report(a) => report::report(&a.records, a.common.out.as_deref()),
        Command::Weights(a) => commands::weights(a.seed, a.vocab_size, &a.file),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kvprune: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
