use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tsnormlab::cli::{self, Overrides, ReportFormat};

/// Normalization expressivity laboratory for small Transformer encoders.
#[derive(Parser)]
#[command(name = "tsnormlab", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the expressivity bound for a configured model and strategy.
    Bound {
        #[arg(long)]
        config: PathBuf,
        /// Overrides every config-declared seed.
        #[arg(long)]
        seed: Option<u64>,
        /// "appendix" or "theorem2"
        #[arg(long)]
        c1_variant: Option<String>,
    },
    /// Monte-Carlo expressivity estimate next to the bound.
    Expressivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        c1_variant: Option<String>,
    },
    /// Run a (strategy x seed) sweep, appending resumable JSON-line records.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Concurrent runs.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Aggregate sweep records into a mean/std table.
    Report {
        /// JSON-lines records file written by `sweep`.
        #[arg(long)]
        records: PathBuf,
        /// "csv" or "json"
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

fn env_seed() -> Option<u64> {
    std::env::var("TSNORMLAB_SEED").ok()?.parse().ok()
}

fn run() -> tsnormlab::Result<String> {
    let args = Args::parse();
    match args.command {
        Command::Bound {
            config,
            seed,
            c1_variant,
        } => cli::cmd_bound(
            &config,
            &Overrides {
                seed: seed.or_else(env_seed),
                c1_variant,
                ..Default::default()
            },
        ),
        Command::Expressivity {
            config,
            seed,
            c1_variant,
        } => cli::cmd_expressivity(
            &config,
            &Overrides {
                seed: seed.or_else(env_seed),
                c1_variant,
                ..Default::default()
            },
        ),
        Command::Sweep { config, seed, jobs } => cli::cmd_sweep(
            &config,
            &Overrides {
                seed: seed.or_else(env_seed),
                jobs,
                ..Default::default()
            },
        ),
        Command::Report { records, format } => {
            cli::cmd_report(&records, ReportFormat::parse(&format)?)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(output) => {
            println!("{output}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
