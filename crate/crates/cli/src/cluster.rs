use std::fs;
use std::path::PathBuf;

use anyhow::{ensure, Context, Result};
use clap::Args;
use htk_core::hotspot::{cluster_objects, Dendrogram};
use htk_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::common::{create_dir, load_manifest, load_run, write_json};
use crate::SplitArg;

#[derive(Clone, Debug, Args)]
pub struct ClusterArgs {
    /// Checkpoint directory of a run with the anticipation module.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Output directory for `dendrogram.txt` and `merges.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// `merges.json`: the merge list of an average-linkage clustering. Leaves
/// are numbered by `labels`; merge `i` creates cluster `labels.len() + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutput {
    pub config_hash: String,
    pub dendrogram: Dendrogram,
}

pub fn cluster(args: &ClusterArgs) -> Result<ClusterOutput> {
    let (state, _, config_hash) = load_run(&args.checkpoint)?;
    let manifest = load_manifest(&args.data)?;
    let images = manifest.load_inactive(&args.data, args.split.into())?;
    let groups: Vec<(String, Vec<Tensor<f32>>)> = manifest
        .objects
        .iter()
        .map(|o| (o.clone(), images.iter().filter(|(e, _)| &e.object == o).map(|(_, t)| t.clone()).collect::<Vec<_>>()))
        .filter(|(_, imgs)| !imgs.is_empty())
        .collect();
    ensure!(groups.len() >= 2, "clustering needs at least two object classes, found {}", groups.len());
    let dendrogram = cluster_objects(&state.model, &groups)?;
    create_dir(&args.out)?;
    let text = format!("# config {config_hash}\n{}", dendrogram.render());
    let path = args.out.join("dendrogram.txt");
    fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    let out = ClusterOutput { config_hash, dendrogram };
    write_json(&args.out.join("merges.json"), &out)?;
    Ok(out)
}
