use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use htk_core::config::{RunConfig, Variant};
use htk_core::data::{json_hash, DatasetManifest, Split};
use htk_core::train::{load_checkpoint, TrainState};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `train.epochs=10`. Repeatable;
    /// applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Ok(base.with_overrides(&self.set)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Everything a training run depends on besides the dataset bytes. Stored
/// in every checkpoint; its hash is the run's provenance key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub config: RunConfig,
    pub variant: Variant,
    pub novel_holdout: Vec<String>,
    pub dataset_hash: String,
}

impl RunSpec {
    pub fn hash(&self) -> Result<String> {
        Ok(json_hash(self)?)
    }
}

/// Loads a checkpoint together with the run specification it was trained under.
pub fn load_run(dir: &Path) -> Result<(TrainState, RunSpec, String)> {
    let (state, manifest) = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let spec: RunSpec = serde_json::from_value(manifest.config)
        .with_context(|| format!("checkpoint {} has no run specification", dir.display()))?;
    Ok((state, spec, manifest.config_hash))
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(root).with_context(|| format!("loading dataset {}", root.display()))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut body = serde_json::to_vec_pretty(value)?;
    body.push(b'\n');
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Rejects class names the dataset does not know.
pub fn check_objects(manifest: &DatasetManifest, objects: &[String]) -> Result<()> {
    for o in objects {
        if !manifest.objects.contains(o) {
            anyhow::bail!("unknown object class {o:?}; the dataset has {:?}", manifest.objects);
        }
    }
    Ok(())
}
