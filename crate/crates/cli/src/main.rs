//! `apbm`: command-line front end for the Monte-Carlo tracking harness.

use std::path::PathBuf;
use std::process::ExitCode;

use apbm_core::experiment::{
    compare_paths, parse_config, report, run_experiment, simulate_only, ExperimentConfig, Profile, RunOptions,
};
use apbm_core::Error;
use clap::{Args, Parser, Subcommand};
use log::{error, warn};

const EXIT_RUN_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "apbm", version, about = "Constrained APBM tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate truth trajectories only.
    Simulate(RunArgs),
    /// Run the full Monte-Carlo experiment and write CSV results.
    Run(RunArgs),
    /// Compare metrics from result directories or metrics.csv files.
    Compare {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Summarize a result directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment description in `key = value` format.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `experiment.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; run r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    /// Run-size preset: desk or paper.
    #[arg(long)]
    profile: Option<Profile>,
    /// Worker threads, 0 for all cores.
    #[arg(long)]
    workers: Option<usize>,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(profile) = args.profile {
        cfg.apply_profile(profile);
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<u8, Error> {
    match command {
        Command::Simulate(args) => {
            let cfg = load_config(&args)?;
            let seeds = simulate_only(&cfg)?;
            println!("wrote {} trajectories to {}", seeds.len(), cfg.out_dir.display());
            Ok(0)
        }
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let result = run_experiment(&cfg, &RunOptions { write: true, keep_runs: false })?;
            for f in &result.failures {
                warn!("run {} (seed {}) {}: {}", f.run, f.seed, f.label, f.error);
            }
            println!("{}", report(&cfg.out_dir)?);
            Ok(if result.succeeded() { 0 } else { EXIT_RUN_FAILURE })
        }
        Command::Compare { paths } => {
            print!("{}", compare_paths(&paths)?);
            Ok(0)
        }
        Command::Report { dir } => {
            print!("{}", report(&dir)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_config_error() { EXIT_CONFIG } else { EXIT_RUN_FAILURE })
        }
    }
}
