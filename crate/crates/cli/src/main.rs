mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use gvmc::verify::Tier;

use commands::{Failure, Observable, EXIT_CONFIG};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "gvmc", version, about = "Grassmann variational Monte Carlo for spin-1/2 Heisenberg spectra")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed and GVMC_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory and GVMC_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a subspace with stochastic reconfiguration.
    Optimize {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate observables on a checkpoint.
    Estimate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "energy")]
        observable: Observable,
    },
    /// Exact diagonalization of the configured sector.
    Ed {
        #[command(flatten)]
        run: RunArgs,
        /// Number of levels (defaults to n_states).
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Check the sampling and minor identities by exact enumeration.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        tier: TierArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run against a sign-corrupted minor routine.
        #[arg(long, hide = true)]
        mutate: bool,
    },
    /// Time sampling, local matrices and SR steps.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TierArg {
    Fast,
    Full,
}

fn load(run: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&run.config).map_err(Failure::config)?;
    cfg.apply_overrides(run.seed, run.out.clone()).map_err(Failure::config)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::config)?;
    }
    match cli.command {
        Command::Optimize { run, checkpoint } => {
            let cfg = load(&run)?;
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            ctrlc::set_handler(move || {
                log::warn!("interrupt received; stopping after the current step");
                flag.store(true, Ordering::SeqCst);
            })?;
            commands::cmd_optimize(&cfg, checkpoint.as_deref(), stop)
        }
        Command::Estimate {
            run,
            checkpoint,
            observable,
        } => commands::cmd_estimate(&load(&run)?, &checkpoint, observable),
        Command::Ed { run, levels } => commands::cmd_ed(&load(&run)?, levels),
        Command::Verify { tier, seed, mutate } => {
            let tier = match tier {
                TierArg::Fast => Tier::Fast,
                TierArg::Full => Tier::Full,
            };
            commands::cmd_verify(tier, seed, mutate)
        }
        Command::Bench { run, steps } => commands::cmd_bench(&load(&run)?, steps),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            if f.code == EXIT_CONFIG {
                eprintln!("(configuration error)");
            }
            ExitCode::from(f.code)
        }
    }
}
