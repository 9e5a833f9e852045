use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use pcdyn::harness::{self, ExperimentConfig, Stage};

/// Predictive-coding feedback dynamics experiments.
#[derive(Debug, Parser)]
#[command(name = "pcdyn", version)]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configuration's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Directory with the CIFAR-10 binary batch files.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the feed-forward weights (and any configured baselines).
    TrainFf,
    /// Train the feedback weights on top of `ff.pcw`.
    TrainFb,
    /// Optimize hyper-parameters for every configured noise condition.
    TrainHp,
    /// Evaluate learned and fixed hyper-parameters; writes `metrics.csv`.
    Eval,
    /// Median minimal adversarial perturbation per configuration.
    Attack,
    /// Hyper-parameter training with the ablation masks, then evaluation.
    Ablate,
    /// Relative hyper-parameter table and charts from existing runs.
    Report,
    /// Every stage listed in the configuration.
    Run,
    /// Print the effective configuration as JSON.
    Config,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new("default"),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(dir) = cli.data {
        cfg.data.dir = Some(dir);
    }
    let stages = match cli.command {
        Command::TrainFf => vec![Stage::TrainFf],
        Command::TrainFb => vec![Stage::TrainFb],
        Command::TrainHp => vec![Stage::TrainHp],
        Command::Eval => vec![Stage::Eval],
        Command::Attack => vec![Stage::Attack],
        Command::Ablate => {
            cfg.eval.include_ablation = true;
            vec![Stage::Ablate, Stage::Eval]
        }
        Command::Report => vec![Stage::Report],
        Command::Run => cfg.stages.clone(),
        Command::Config => {
            println!("{}", cfg.to_json());
            return Ok(());
        }
    };
    cfg.stages = stages;
    let summary = harness::run_experiment(&cfg)?;
    for path in &summary.artifacts {
        println!("wrote {}", path.display());
    }
    for (name, result) in &summary.attacks {
        println!("attack {name}: median minimal perturbation {} over {} images", result.median, result.images.len());
    }
    Ok(())
}
