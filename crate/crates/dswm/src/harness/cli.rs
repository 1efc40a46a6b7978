//! Command-line interface. Exit codes: 0 success, 1 runtime/IO failure,
//! 2 configuration problems, 3 missing prerequisites, 4 failed result
//! assertions.

use crate::gridworld::TopologyKind;
use crate::harness::config::ExperimentConfig;
use crate::harness::stages::{
    stage_eval_rollouts, stage_make_datasets, stage_train, stage_train_agents, StageContext,
};
use crate::harness::{HarnessError, Result};
use crate::models::ModelKind;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "dswm",
    about = "Dual-stream world model experiments: datasets, training, rollouts, RL agents",
    version
)]
struct Cli {
    /// Path to a TOML config; defaults to the published settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the worker count from the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate pattern-map pools and training datasets for every topology.
    MakeDatasets,
    /// Train generative models (resumes from checkpoints when present).
    Train {
        /// Model to train: dswm | world. Trains both when omitted.
        #[arg(long)]
        model: Option<String>,
        /// Topology to train on. Trains all configured when omitted.
        #[arg(long)]
        topology: Option<String>,
    },
    /// Paired generative rollout evaluation plus place-field analysis.
    EvalRollouts {
        /// Restrict to one topology.
        #[arg(long)]
        topology: Option<String>,
    },
    /// Run the reinforcement-learning sessions and summary table.
    TrainAgents {
        /// Restrict to one topology.
        #[arg(long)]
        topology: Option<String>,
    },
    /// Run the whole pipeline end to end.
    ReproduceAll,
}

fn parse_model(name: &str) -> Result<ModelKind> {
    ModelKind::from_name(name)
        .ok_or_else(|| HarnessError::Config(format!("unknown model {name:?} (dswm | world)")))
}

fn parse_topology(name: &str) -> Result<TopologyKind> {
    TopologyKind::from_name(name).ok_or_else(|| {
        HarnessError::Config(format!("unknown topology {name:?} (open | rooms | ring | hallway)"))
    })
}

fn select_topologies(ctx: &StageContext, filter: Option<&str>) -> Result<Vec<TopologyKind>> {
    match filter {
        Some(name) => {
            let topo = parse_topology(name)?;
            if !ctx.config.scale.topologies.contains(&topo) {
                return Err(HarnessError::Config(format!(
                    "topology {} is not in the configured set",
                    topo.name()
                )));
            }
            Ok(vec![topo])
        }
        None => Ok(ctx.config.scale.topologies.clone()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers.max(1);
    }
    let mut ctx = StageContext::open(config, &cli.out)?;
    let log = |line: &str| println!("{line}");
    match cli.command {
        Command::MakeDatasets => stage_make_datasets(&mut ctx, &log),
        Command::Train { model, topology } => {
            let kinds = match model.as_deref() {
                Some(name) => vec![parse_model(name)?],
                None => ModelKind::ALL.to_vec(),
            };
            let topologies = select_topologies(&ctx, topology.as_deref())?;
            for kind in kinds {
                for &topo in &topologies {
                    stage_train(&mut ctx, kind, topo, &log)?;
                }
            }
            Ok(())
        }
        Command::EvalRollouts { topology } => {
            let topologies = select_topologies(&ctx, topology.as_deref())?;
            stage_eval_rollouts(&mut ctx, &topologies, &log)
        }
        Command::TrainAgents { topology } => {
            let topologies = select_topologies(&ctx, topology.as_deref())?;
            stage_train_agents(&mut ctx, &topologies, &log)
        }
        Command::ReproduceAll => {
            stage_make_datasets(&mut ctx, &log)?;
            for (kind, topo) in crate::harness::stages::training_jobs(&ctx.config) {
                stage_train(&mut ctx, kind, topo, &log)?;
            }
            let topologies = ctx.config.scale.topologies.clone();
            stage_eval_rollouts(&mut ctx, &topologies, &log)?;
            stage_train_agents(&mut ctx, &topologies, &log)?;
            log(&format!(
                "reproduce-all complete: {} files recorded in {}",
                ctx.manifest.all_files().len(),
                ctx.root.join("manifest.json").display()
            ));
            Ok(())
        }
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
