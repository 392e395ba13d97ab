use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pg_lab::cli::config::{ExperimentConfig, Overrides};
use pg_lab::cli::image_cmd::{cmd_metrics, MetricsArgs};
use pg_lab::cli::selftest::cmd_selftest;
use pg_lab::cli::toy::{cmd_sweep, cmd_toy};
use pg_lab::cli::{with_jobs, CliError, EXIT_RUNTIME};

/// Guidance lab: guided sampling of an analytic mixture and image color metrics.
#[derive(Parser)]
#[command(name = "pg-lab", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trajectories per strategy.
    #[arg(long)]
    samples: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the configured strategies and report drift from the modes.
    Toy(RunArgs),
    /// Sample every cell of the configured sweep grid.
    Sweep(RunArgs),
    /// Saturation and contrast of the images in a directory.
    Metrics {
        dir: PathBuf,
        #[arg(long, default_value = "*.png")]
        glob: String,
        #[arg(long, default_value = "pg-lab-metrics")]
        out: PathBuf,
        /// Also write channel density estimates.
        #[arg(long)]
        kde: bool,
        /// Fixed KDE bandwidth instead of Silverman's rule.
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Check library invariants on random inputs.
    Selftest,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: args.seed,
        samples: args.samples,
        out: args.out.clone(),
    });
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let jobs = cli.jobs;
    match cli.command {
        Command::Toy(args) => {
            let cfg = load_config(&args)?;
            let outcome = with_jobs(jobs, || cmd_toy(&cfg))??;
            eprintln!("wrote {}", outcome.manifest.display());
            outcome.check_failures()
        }
        Command::Sweep(args) => {
            let cfg = load_config(&args)?;
            let outcome = with_jobs(jobs, || cmd_sweep(&cfg))??;
            eprintln!("wrote {}", outcome.manifest.display());
            outcome.check_failures()
        }
        Command::Metrics { dir, glob, out, kde, bandwidth } => {
            let args = MetricsArgs { dir, glob, out, kde, bandwidth };
            let outcome = with_jobs(jobs, || cmd_metrics(&args))??;
            eprintln!("wrote {}", outcome.manifest.display());
            Ok(())
        }
        Command::Selftest => {
            if with_jobs(jobs, cmd_selftest)? {
                Ok(())
            } else {
                Err(CliError::runtime("selftest failed"))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PG_LAB_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(EXIT_RUNTIME as u8))
        }
    }
}
