//! Checkpoint directories: a `manifest.json` plus one container file per
//! tensor (parameters, optimizer moments, batch-norm moments).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, TrainState};
use crate::error::{Error, Result};
use crate::net::{HotspotModel, ModelConfig, ParamSet, Trainable};
use crate::tensor::{read_tensor, write_tensor, BatchNorm2d, DType, Tensor};

const FORMAT: &str = "htk-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormEntry {
    pub momentum: f64,
    pub eps: f64,
    pub updates: u64,
    pub mean_file: String,
    pub var_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamEntry {
    pub config: AdamConfig,
    pub t: u64,
    pub m_files: Vec<String>,
    pub v_files: Vec<String>,
}

/// Position of the training random stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (it exceeds the JSON integer range).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |d: &str| Error::Config(format!("checkpoint rng state: {d}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("bad word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub epoch: usize,
    pub step: u64,
    pub config_hash: String,
    /// Full run configuration the checkpoint was trained under.
    pub config: serde_json::Value,
    pub model: ModelConfig,
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub params: Vec<TensorEntry>,
    pub batch_norm: Vec<BatchNormEntry>,
    pub adam: AdamEntry,
    pub rng: RngState,
}

fn put(dir: &Path, file: &str, t: &Tensor<f32>) -> Result<()> {
    write_tensor(&dir.join(file), t)
}

fn get(dir: &Path, file: &str, shape: Option<&[usize]>) -> Result<Tensor<f32>> {
    let path = dir.join(file);
    let any = read_tensor(&path)?;
    if any.dtype() != DType::F32 {
        return Err(Error::Format { path, detail: "checkpoint tensors must be f32".into() });
    }
    if shape.is_some_and(|s| s != any.shape()) {
        return Err(Error::Format {
            path,
            detail: format!("shape {:?} does not match manifest {:?}", any.shape(), shape),
        });
    }
    Ok(any.into_tensor())
}

pub fn save_checkpoint(dir: &Path, state: &TrainState, config: &serde_json::Value, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let model = &state.model;
    let mut params = Vec::new();
    let mut m_files = Vec::new();
    let mut v_files = Vec::new();
    for (i, (name, t)) in model.params().iter().enumerate() {
        let file = format!("params/{name}.htk");
        put(dir, &file, t)?;
        params.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), file });
        let (m, v) = (format!("adam/{name}.m.htk"), format!("adam/{name}.v.htk"));
        put(dir, &m, &state.adam.m[i])?;
        put(dir, &v, &state.adam.v[i])?;
        m_files.push(m);
        v_files.push(v);
    }
    let mut batch_norm = Vec::new();
    for (j, bn) in model.bn.iter().enumerate() {
        let (mean, var) = bn.moments_as_tensors();
        let (mf, vf) = (format!("batch_norm/{j}.mean.htk"), format!("batch_norm/{j}.var.htk"));
        put(dir, &mf, &mean)?;
        put(dir, &vf, &var)?;
        batch_norm.push(BatchNormEntry {
            momentum: bn.momentum,
            eps: bn.eps,
            updates: bn.updates,
            mean_file: mf,
            var_file: vf,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        epoch: state.epoch,
        step: state.step,
        config_hash: config_hash.into(),
        config: config.clone(),
        model: model.config.clone(),
        actions: model.actions.clone(),
        objects: model.objects.clone(),
        params,
        batch_norm,
        adam: AdamEntry { config: state.adam.config, t: state.adam.t, m_files, v_files },
        rng: RngState::capture(&state.rng),
    };
    let path = dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointManifest)> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format { path: path.clone(), detail: e.to_string() })?;
    if manifest.format != FORMAT {
        return Err(Error::Format { path, detail: format!("unsupported format {:?}", manifest.format) });
    }
    let mut params = ParamSet::default();
    for e in &manifest.params {
        params.push(e.name.clone(), get(dir, &e.file, Some(&e.shape))?);
    }
    let mut bn = Vec::new();
    for e in &manifest.batch_norm {
        bn.push(BatchNorm2d {
            running_mean: get(dir, &e.mean_file, None)?.into_data(),
            running_var: get(dir, &e.var_file, None)?.into_data(),
            momentum: e.momentum,
            eps: e.eps,
            updates: e.updates,
        });
    }
    let model = HotspotModel::from_parts(
        manifest.model.clone(),
        manifest.actions.clone(),
        manifest.objects.clone(),
        params,
        bn,
    )?;
    let a = &manifest.adam;
    if a.m_files.len() != manifest.params.len() || a.v_files.len() != manifest.params.len() {
        return Err(Error::Format { path, detail: "optimizer state does not cover every parameter".into() });
    }
    let mut m = Vec::new();
    let mut v = Vec::new();
    for ((e, mf), vf) in manifest.params.iter().zip(&a.m_files).zip(&a.v_files) {
        m.push(get(dir, mf, Some(&e.shape))?);
        v.push(get(dir, vf, Some(&e.shape))?);
    }
    let adam = Adam { config: a.config, t: a.t, m, v };
    let state = TrainState { model, adam, epoch: manifest.epoch, step: manifest.step, rng: manifest.rng.restore()? };
    Ok((state, manifest))
}
