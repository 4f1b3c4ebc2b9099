use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedparking::harness::{self, ExperimentConfig, Mode, RunArtifact};

/// Federated occupancy forecasting and incentive pricing for parking-lot
/// edge computing.
#[derive(Parser)]
#[command(name = "fedparking", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the occupancy forecaster with federated averaging.
    FedTrain(Common),
    /// Solve the pricing game with the projected-gradient iteration.
    GameSolve(Common),
    /// Train the multi-agent PPO pricing policies.
    DrlTrain(Common),
    /// Run one of the capacity case studies.
    CaseStudy {
        /// Case number, starting at 1.
        #[arg(long)]
        case: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Compare game-based rewards against the best linear pricing rule.
    CompareLinear(Common),
    /// Sweep vehicle parameters and record best-response compute.
    BrSweep(Common),
    /// Evaluate a saved forecaster checkpoint on each client's test split.
    Eval(Common),
    /// Compare federated training against isolated per-client training.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self, mode: Option<Mode>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(mode) = mode {
            cfg.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(command: &Command) -> Result<(RunArtifact, PathBuf)> {
    let (cfg, art) = match command {
        Command::FedTrain(c) => run_mode(c, Mode::FedTrain)?,
        Command::GameSolve(c) => run_mode(c, Mode::GameSolve)?,
        Command::DrlTrain(c) => run_mode(c, Mode::DrlTrain)?,
        Command::Eval(c) => run_mode(c, Mode::Eval)?,
        Command::Compare(c) => run_mode(c, Mode::Compare)?,
        Command::CaseStudy { case, common } => {
            let cfg = common.load(None)?;
            let art = harness::run_case_study(*case, &cfg)?;
            (cfg, art)
        }
        Command::CompareLinear(c) => {
            let cfg = c.load(None)?;
            let art = harness::run_compare_linear(&cfg)?;
            (cfg, art)
        }
        Command::BrSweep(c) => {
            let cfg = c.load(None)?;
            let art = harness::run_br_sweep(&cfg)?;
            (cfg, art)
        }
    };
    art.write(&cfg.out_dir)
        .with_context(|| format!("writing artifacts to {}", cfg.out_dir.display()))?;
    Ok((art, cfg.out_dir))
}

fn run_mode(common: &Common, mode: Mode) -> Result<(ExperimentConfig, RunArtifact)> {
    let cfg = common.load(Some(mode))?;
    let art = harness::run(&cfg)?;
    Ok((cfg, art))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok((art, out)) => {
            for (name, value) in &art.summary.metrics {
                println!("{name} = {value}");
            }
            log::info!("artifacts written to {}", out.display());
            let failed = art.failed_checks();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                for check in failed {
                    eprintln!("check failed: {}: {}", check.name, check.detail);
                }
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
