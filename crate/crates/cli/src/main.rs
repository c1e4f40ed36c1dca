//! `cpo`: data generation, counterfactual pairs, SFT and preference
//! training, drift monitoring and evaluation from the command line.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric failure, 4 artifact
//! mismatch.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cpo", version, about = "Counterfactual preference optimization toolkit")]
pub struct Cli {
    /// Directory receiving outputs and run manifests.
    #[arg(long, global = true, env = "CPO_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct WorldArgs {
    /// World configuration file.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Concept graph document; overrides the world file's `graph`.
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

impl WorldArgs {
    pub fn given(&self) -> bool {
        self.world.is_some() || self.graph.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Sft,
    Cpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Estimator {
    Exact,
    Rollout,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic corpus.
    GenData {
        #[command(flatten)]
        world: WorldArgs,
        /// Number of samples, split evenly across regimes.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        regimes: Option<usize>,
        /// Total-variation shift between consecutive regimes.
        #[arg(long)]
        shift_tv: Option<f64>,
        #[arg(long, default_value = "samples.jsonl")]
        output: PathBuf,
    },
    /// Pair every sample with a counterfactual for each other entity.
    GenCounterfactuals {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "pairs.jsonl")]
        output: PathBuf,
    },
    /// Supervised or preference training; writes a checkpoint and metrics.
    Train {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, value_enum)]
        mode: TrainMode,
        /// Training configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to start from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Frozen reference checkpoint (preference mode).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Sample corpus (supervised mode).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Pair corpus; repeat for one file per regime, in regime order.
        #[arg(long)]
        pairs: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Output stem; defaults to the mode name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Per-position drift traces of a checkpoint over a corpus.
    Monitor {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Total-variation threshold for flagging a transition.
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
        /// How answer distributions are read off the policy. Forced
        /// completion is off-distribution mid-phrase for window policies, so
        /// sampled continuations are the default.
        #[arg(long, value_enum, default_value_t = Estimator::Rollout)]
        estimator: Estimator,
        /// Continuations per state in rollout mode.
        #[arg(long, default_value_t = 100)]
        rollouts: usize,
        #[arg(long, default_value = "drift.csv")]
        output: PathBuf,
    },
    /// Greedy-decoding accuracy, BLEU and ROUGE-L of a checkpoint.
    Eval {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = cpo_core::eval_metrics::DEFAULT_ROUGE_BETA)]
        rouge_beta: f64,
        #[arg(long, default_value_t = cpo_core::trajectory::DEFAULT_MAX_LEN)]
        max_len: usize,
        #[arg(long, default_value = "eval.csv")]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
