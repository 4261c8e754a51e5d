mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mindrisk_core::Execution;
use tracing_subscriber::EnvFilter;

use commands::{Context, Failure, Status};
use config::{Overrides, PipelineConfig};

/// Weekly mental-health risk assessment from wearable behavior and surveys.
#[derive(Debug, Parser)]
#[command(name = "mindrisk", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replay model responses from this tape.
    #[arg(long, global = true)]
    tape: Option<PathBuf>,
    /// Seed for augmentation, fold assignment and synthetic fixtures.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Causal strength threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Self-refine loop budget.
    #[arg(long, global = true)]
    k: Option<u32>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Write every backend request and response to this JSONL file.
    #[arg(long, global = true)]
    record_log: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse raw files into weekly cases.
    Ingest,
    /// Rewrite each case's behavior text into a compact format.
    Refine,
    /// Run the causal assessment on refined cases.
    Assess,
    /// Add counterfactual variants to an instruction-tuning set.
    Augment {
        /// JSONL of {id, record, outcome, source_dataset}.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score assessments against gold labels.
    Evaluate {
        /// Also write per-case prediction rows.
        #[arg(long)]
        rows: bool,
    },
    /// Collect stage reports into one summary.
    Report,
    /// Generate a fixture directory (needs --out).
    Fixture {
        #[arg(value_enum)]
        kind: FixtureKind,
    },
    /// Convert a session log into a replay tape (written to --out).
    RecordTape { log: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FixtureKind {
    Golden,
    Pmdata,
    Globem,
}

fn init_tracing(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_env("MINDRISK_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn run(cli: Cli) -> Result<Status, Failure> {
    let out_required = || {
        cli.out
            .clone()
            .ok_or_else(|| Failure::Usage(anyhow::anyhow!("--out is required for this command")))
    };
    match &cli.command {
        Command::Fixture { kind } => {
            let out = out_required()?;
            return match kind {
                FixtureKind::Golden => commands::fixture_golden(&out),
                FixtureKind::Pmdata => commands::fixture_synthetic("pmdata", cli.seed.unwrap_or(0), &out),
                FixtureKind::Globem => commands::fixture_synthetic("globem", cli.seed.unwrap_or(0), &out),
            };
        }
        Command::RecordTape { log } => return commands::record_tape_from_log(log, &out_required()?),
        _ => {}
    }

    let overrides = Overrides {
        tape: cli.tape.clone(),
        seed: cli.seed,
        tau: cli.tau,
        k: cli.k,
        out: cli.out.clone(),
    };
    let config = PipelineConfig::load(cli.config.as_deref(), &overrides).map_err(Failure::Usage)?;
    let ctx = Context {
        config,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        },
        record_log: cli.record_log.clone(),
    };
    match &cli.command {
        Command::Ingest => commands::ingest(&ctx),
        Command::Refine => commands::refine(&ctx),
        Command::Assess => commands::assess(&ctx),
        Command::Augment { input } => commands::augment(&ctx, input.as_deref()),
        Command::Evaluate { rows } => commands::evaluate(&ctx, *rows),
        Command::Report => commands::report(&ctx),
        Command::Fixture { .. } | Command::RecordTape { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_tracing(cli.verbose);
    match run(cli) {
        Ok(status) => ExitCode::from(status.exit_code()),
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.exit_code())
        }
    }
}
