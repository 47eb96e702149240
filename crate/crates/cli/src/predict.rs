use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use htk_core::hotspot::{predict_hotspots, Heatmap, HotspotConfig};
use htk_core::tensor::{read_tensor, write_tensor};
use htk_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::common::{check_objects, create_dir, load_manifest, load_run, write_json};
use crate::SplitArg;

pub const PREDICTIONS_FORMAT: &str = "htk-predictions-1";

#[derive(Clone, Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint directory, e.g. `run/final`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Comma-separated object classes to predict; all classes when omitted.
    #[arg(long, value_delimiter = ',', value_name = "CLASSES")]
    pub objects: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override a `hotspot.*` value of the checkpoint's configuration.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedImage {
    pub id: String,
    pub object: String,
    /// `K×H×W` f64 container of unit-sum maps, in action order.
    pub maps: String,
    /// One 8-bit map per action, in action order.
    pub pgm: Vec<String>,
}

/// `index.json` of a predictions directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionIndex {
    pub format: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub epoch: usize,
    pub novel_holdout: Vec<String>,
    pub hotspot: HotspotConfig,
    pub actions: Vec<String>,
    pub images: Vec<PredictedImage>,
}

impl PredictionIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let index: PredictionIndex =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        anyhow::ensure!(
            index.format == PREDICTIONS_FORMAT,
            "{}: unsupported format {:?}",
            path.display(),
            index.format
        );
        Ok(index)
    }

    /// Reads the maps of one image back, one unit-sum heatmap per action.
    pub fn read_maps(&self, dir: &Path, image: &PredictedImage) -> Result<Vec<Heatmap>> {
        let path = dir.join(&image.maps);
        let t: Tensor<f64> = read_tensor(&path)?.into_tensor();
        anyhow::ensure!(
            t.rank() == 3 && t.shape()[0] == self.actions.len(),
            "{}: expected {} maps, got shape {:?}",
            path.display(),
            self.actions.len(),
            t.shape()
        );
        (0..self.actions.len()).map(|k| Ok(Heatmap::from_tensor(&t.index_axis0(k)?)?.to_unit_sum())).collect()
    }
}

pub fn predict(args: &PredictArgs) -> Result<PredictionIndex> {
    let (state, spec, config_hash) = load_run(&args.checkpoint)?;
    let hotspot_overrides: Vec<String> = args
        .set
        .iter()
        .map(|s| {
            if s.starts_with("hotspot.") {
                Ok(s.clone())
            } else {
                Err(anyhow::anyhow!("predict only accepts hotspot.* overrides, got {s:?}"))
            }
        })
        .collect::<Result<_>>()?;
    let hotspot = spec.config.with_overrides(&hotspot_overrides)?.hotspot;
    let manifest = load_manifest(&args.data)?;
    anyhow::ensure!(
        manifest.hash()? == spec.dataset_hash,
        "checkpoint was trained on dataset {}, {} is {}",
        spec.dataset_hash,
        args.data.display(),
        manifest.hash()?
    );
    check_objects(&manifest, &args.objects)?;
    let images: Vec<_> = manifest
        .load_inactive(&args.data, args.split.into())?
        .into_iter()
        .filter(|(e, _)| args.objects.is_empty() || args.objects.contains(&e.object))
        .collect();
    create_dir(&args.out)?;
    let model = &state.model;
    let predicted = images
        .par_iter()
        .map(|(entry, image)| {
            let stack = predict_hotspots(model, &entry.id, image, &hotspot)?;
            let maps = Tensor::stack(&stack.maps.iter().map(Heatmap::to_tensor).collect::<Vec<_>>())?;
            let maps_file = format!("{}.htk", entry.id);
            write_tensor(&args.out.join(&maps_file), &maps)?;
            let mut pgm = Vec::new();
            for (action, map) in manifest.actions.iter().zip(&stack.maps) {
                let file = format!("{}_{action}.pgm", entry.id);
                let path = args.out.join(&file);
                fs::write(&path, map.to_pgm()).with_context(|| format!("writing {}", path.display()))?;
                pgm.push(file);
            }
            Ok(PredictedImage { id: entry.id.clone(), object: entry.object.clone(), maps: maps_file, pgm })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = PredictionIndex {
        format: PREDICTIONS_FORMAT.into(),
        config_hash,
        dataset_hash: spec.dataset_hash,
        epoch: state.epoch,
        novel_holdout: spec.novel_holdout,
        hotspot,
        actions: manifest.actions.clone(),
        images: predicted,
    };
    write_json(&args.out.join("index.json"), &index)?;
    println!(
        "wrote {} maps for {} images to {}, config {}",
        index.images.len() * index.actions.len(),
        index.images.len(),
        args.out.display(),
        index.config_hash
    );
    Ok(index)
}
