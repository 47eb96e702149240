//! The `htk` command-line tool.
//!
//! Every command is a plain function returning a typed result so the
//! acceptance suite and the integration tests can drive the same code paths
//! as the binary. Output artifacts carry the hash of the run specification
//! they were produced under.

use anyhow::Result;
use clap::{Parser, Subcommand};

pub mod cluster;
mod common;
pub mod eval;
pub mod gen_data;
pub mod predict;
pub mod train;

pub use cluster::{cluster, ClusterArgs, ClusterOutput};
pub use common::{ConfigArgs, RunSpec, SplitArg};
pub use eval::{eval, Baseline, EvalArgs, EvalReport, EvalRow};
pub use gen_data::{gen_data, GenDataArgs};
pub use predict::{predict, PredictArgs, PredictedImage, PredictionIndex};
pub use train::{train, TrainArgs, TrainOutcome, TrainSummary};

#[derive(Debug, Parser)]
#[command(name = "htk", version, about = "Learn interaction hotspots from weakly labeled clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic clip dataset.
    GenData(GenDataArgs),
    /// Train a hotspot model on a generated dataset.
    Train(TrainArgs),
    /// Write hotspot maps for the inactive images of a split.
    Predict(PredictArgs),
    /// Score predictions or a baseline against the keypoint annotations.
    Eval(EvalArgs),
    /// Cluster object classes by their anticipated embeddings.
    Cluster(ClusterArgs),
}

/// Runs one command inside the worker pool sized by `HTK_THREADS`.
pub fn run(cli: Cli) -> Result<()> {
    htk_core::parallel::install(move || match cli.command {
        Command::GenData(a) => gen_data(&a).map(drop),
        Command::Train(a) => train(&a).map(drop),
        Command::Predict(a) => predict(&a).map(drop),
        Command::Eval(a) => eval(&a).map(drop),
        Command::Cluster(a) => cluster(&a).map(drop),
    })?
}

/// 2 for numerical failures, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|c| c.downcast_ref::<htk_core::Error>().is_some_and(htk_core::Error::is_numerical));
    if numerical {
        2
    } else {
        1
    }
}
