//! `robustcov`: simulate data, estimate shape matrices, impute gaps and run
//! the benchmark sweeps from TOML configuration files.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, Overrides};

#[derive(Parser)]
#[command(name = "robustcov", version, about = "Robust covariance estimation with missing data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic data set with missing entries.
    Simulate(Common),
    /// Estimate shape matrices from a CSV data file.
    Estimate(Common),
    /// Run a benchmark sweep described by an experiment config.
    Benchmark(Common),
    /// Fill missing entries with EM-EOF and report the cross-validation error.
    Impute(Common),
    /// Run the MDRM classification experiment.
    Classify(Common),
    /// Run the K-means++ clustering experiment.
    Cluster(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); overrides `threads` in the config.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            threads: self.threads,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => commands::simulate(&c.config, &c.overrides()),
        Command::Estimate(c) => commands::estimate(&c.config, &c.overrides()),
        Command::Benchmark(c) => commands::benchmark(&c.config, &c.overrides(), None),
        Command::Impute(c) => commands::impute(&c.config, &c.overrides()),
        Command::Classify(c) => commands::benchmark(&c.config, &c.overrides(), Some("classify")),
        Command::Cluster(c) => commands::benchmark(&c.config, &c.overrides(), Some("cluster")),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Partial(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(2)
        }
    }
}
