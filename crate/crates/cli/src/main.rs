use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use morbit_cli::{analyze, checkgrad, compare, runner, CliError};

/// Min-max multi-objective bilevel optimization experiments.
#[derive(Parser)]
#[command(name = "morbit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Concurrent seed workers (falls back to MORBIT_WORKERS, then the
    /// config, then the machine's parallelism capped by the seed count).
    #[arg(long)]
    workers: Option<usize>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment across seeds; writes one trajectory
    /// CSV per seed, a summary, and the resolved config.
    Run(RunArgs),
    /// Finite-difference consistency checks of the configured problem's
    /// oracles; exit 1 if any check exceeds tolerance.
    Checkgrad {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run min-max and min-avg on identical seeds and report worst-task
    /// losses on training tasks and a held-out suite.
    Compare(RunArgs),
    /// Log-log rate fit of a trajectory CSV column.
    Analyze {
        /// Trajectory CSV produced by `run`.
        csv: PathBuf,
        /// Column to fit (for convergence rates: grad_norm_x).
        column: String,
        /// Ignore iterations below this k.
        #[arg(long, default_value_t = 1)]
        k_min: usize,
    },
}

fn workers_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("MORBIT_WORKERS") {
        Err(_) => Ok(None),
        Ok(raw) => {
            let n: usize = raw
                .parse()
                .map_err(|_| CliError::Invalid(format!("MORBIT_WORKERS must be a positive integer, got `{raw}`")))?;
            if n == 0 {
                return Err(CliError::Invalid("MORBIT_WORKERS must be positive".into()));
            }
            Ok(Some(n))
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let workers = match args.workers {
                Some(w) => Some(w),
                None => workers_from_env()?,
            };
            runner::cmd_run(&args.config, args.output_dir.as_deref(), workers, args.seed_override)
        }
        Command::Checkgrad { config } => checkgrad::cmd_checkgrad(&config),
        Command::Compare(args) => {
            let workers = match args.workers {
                Some(w) => Some(w),
                None => workers_from_env()?,
            };
            compare::cmd_compare(&args.config, args.output_dir.as_deref(), workers, args.seed_override)
        }
        Command::Analyze { csv, column, k_min } => analyze::cmd_analyze(&csv, &column, k_min),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
