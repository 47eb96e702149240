use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use htk_core::config::{RunConfig, Variant};
use htk_core::data::{novel_object_split, Split};
use htk_core::train::{fit, AntLossMode, EpochLog, FitOptions, TrainState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::common::{check_objects, create_dir, load_manifest, load_run, write_json};
use crate::{ConfigArgs, RunSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AntLossArg {
    L2,
    Triplet,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, the log and the run summary.
    #[arg(long)]
    pub out: PathBuf,
    /// Rung of the ablation ladder: basic, +res, +l2 or full. Applied
    /// before `--set` overrides.
    #[arg(long, default_value = "full")]
    pub variant: Variant,
    /// Comma-separated object classes withheld from training.
    #[arg(long, value_delimiter = ',', value_name = "CLASSES")]
    pub novel_holdout: Vec<String>,
    /// Continue from this checkpoint directory; the run specification must
    /// match the one it was trained under.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
    /// Training seed; overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epoch budget; overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Anticipation loss; overrides `train.ant_loss`.
    #[arg(long, value_enum)]
    pub anticipation_loss: Option<AntLossArg>,
    /// Stop after this many completed epochs without finishing the run.
    #[arg(long, value_name = "EPOCHS")]
    pub stop_after: Option<usize>,
}

/// `summary.json` of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub epochs: usize,
    /// Action accuracy on the test clips of the familiar classes.
    pub test_accuracy: f64,
    pub test_clips: usize,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub spec: RunSpec,
    pub config_hash: String,
    pub logs: Vec<EpochLog>,
    pub summary: TrainSummary,
    pub seconds: f64,
}

fn build_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    args.variant.apply(&mut cfg);
    let mut cfg = cfg.with_overrides(&args.config.set)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(mode) = args.anticipation_loss {
        cfg.train.ant_loss = match mode {
            AntLossArg::L2 => AntLossMode::L2,
            AntLossArg::Triplet => AntLossMode::Triplet,
        };
    }
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<TrainOutcome> {
    let started = Instant::now();
    let manifest = load_manifest(&args.data)?;
    manifest.verify(&args.data)?;
    check_objects(&manifest, &args.novel_holdout)?;
    let mut cfg = build_config(args)?;
    // The dataset is already generated; record the configuration it was
    // generated under rather than the defaults.
    cfg.data = manifest.config.clone();
    cfg.validate()?;

    let mut holdout = args.novel_holdout.clone();
    holdout.sort();
    holdout.dedup();
    let spec = RunSpec { config: cfg, variant: args.variant, novel_holdout: holdout, dataset_hash: manifest.hash()? };
    let config_hash = spec.hash()?;
    let familiar = if spec.novel_holdout.is_empty() {
        manifest.clone()
    } else {
        novel_object_split(&manifest, &spec.novel_holdout)?.0
    };

    let tc = &spec.config.train;
    let mut state = match &args.resume {
        Some(dir) => {
            let (state, resumed, hash) = load_run(dir)?;
            if hash != config_hash {
                bail!(
                    "checkpoint {} was trained under run specification {hash}, this run is {config_hash}",
                    dir.display()
                );
            }
            debug_assert_eq!(resumed, spec);
            log::info!("resuming after epoch {}", state.epoch);
            state
        }
        None => TrainState::new(spec.config.model.clone(), manifest.actions.clone(), manifest.objects.clone(), tc)?,
    };

    create_dir(&args.out)?;
    write_json(&args.out.join("run.json"), &serde_json::json!({ "config_hash": config_hash, "spec": spec }))?;
    let set = familiar.load_train_set(&args.data, Split::Train)?;
    log::info!(
        "training {} ({} clips, {} inactive images) for {} epochs, config {config_hash}",
        spec.variant,
        set.samples.len(),
        set.inactive.len(),
        tc.epochs
    );
    let opts = FitOptions {
        checkpoint_dir: Some(args.out.clone()),
        log_path: Some(args.out.join("log.jsonl")),
        config_snapshot: serde_json::to_value(&spec)?,
        config_hash: config_hash.clone(),
        stop_after: args.stop_after,
    };
    let logs = fit(&mut state, &set, tc, &opts)?;

    let clips = familiar.load_clips(&args.data, Split::Test)?;
    let correct = clips
        .par_iter()
        .map(|(entry, clip)| {
            let k = state.model.classify_clip(clip)?;
            Ok(usize::from(manifest.actions[k] == entry.action))
        })
        .collect::<htk_core::Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    let summary = TrainSummary {
        config_hash: config_hash.clone(),
        epochs: state.epoch,
        test_accuracy: if clips.is_empty() { f64::NAN } else { correct as f64 / clips.len() as f64 },
        test_clips: clips.len(),
        final_loss: logs.last().map(|l| l.loss),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "{} after {} epochs: test accuracy {:.3} on {} clips, config {config_hash}",
        spec.variant, summary.epochs, summary.test_accuracy, summary.test_clips
    );
    Ok(TrainOutcome { spec, config_hash, logs, summary, seconds: started.elapsed().as_secs_f64() })
}
