use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::{combined_loss, Adam, AdamConfig, AntLossMode, LossBreakdown, TrainConfig, TrainSet};
use crate::error::{Error, Result};
use crate::net::{HotspotModel, Img2Heatmap, ModelConfig, Trainable};
use crate::tensor::{Tape, Tensor};

/// Everything that evolves during training; enough to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: HotspotModel<f32>,
    pub adam: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Random stream used for shuffling and negative sampling; initialization
/// draws from stream 0 of the same seed.
const TRAIN_STREAM: u64 = 1;

impl TrainState {
    pub fn new(config: ModelConfig, actions: Vec<String>, objects: Vec<String>, train: &TrainConfig) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(train.seed);
        let model = HotspotModel::new(config, actions, objects, &mut init)?;
        let adam = Adam::new(train.adam(), model.params().tensors());
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(TrainState { model, adam, epoch: 0, step: 0, rng })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub loss: f64,
    pub cls: f64,
    pub ant: f64,
    pub aux: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory receiving `epoch-NNN` checkpoints and a `final` copy.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only JSON-lines training log.
    pub log_path: Option<PathBuf>,
    /// Serialized run configuration stored in every checkpoint.
    pub config_snapshot: serde_json::Value,
    pub config_hash: String,
    /// Stop once this many epochs are complete, even if the configured
    /// budget is larger.
    pub stop_after: Option<usize>,
}

pub fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch-{epoch:03}"))
}

fn write_dump(dir: Option<&Path>, epoch: usize, batch: usize, ids: &[usize], b: &LossBreakdown) -> Option<PathBuf> {
    let dir = dir?;
    let path = dir.join(format!("nonfinite-epoch{epoch}-batch{batch}.json"));
    let body = serde_json::json!({
        "epoch": epoch,
        "batch": batch,
        "samples": ids,
        "loss": { "total": b.total, "cls": b.cls, "ant": b.ant, "aux": b.aux },
    });
    fs::create_dir_all(dir).ok()?;
    fs::write(&path, serde_json::to_vec_pretty(&body).ok()?).ok()?;
    Some(path)
}

fn negative_for<R: Rng>(data: &TrainSet<f32>, batch: &[usize], i: usize, rng: &mut R) -> Option<usize> {
    let own = data.samples[batch[i]].object;
    let in_batch: Vec<usize> =
        batch.iter().filter_map(|&j| data.samples[j].inactive).filter(|&k| data.inactive_object[k] != own).collect();
    if let Some(&k) = in_batch.choose(rng) {
        return Some(k);
    }
    let anywhere: Vec<usize> = (0..data.inactive.len()).filter(|&k| data.inactive_object[k] != own).collect();
    anywhere.choose(rng).copied()
}

/// Trains `state` until `cfg.epochs` (or `opts.stop_after`) epochs are done.
pub fn fit(
    state: &mut TrainState,
    data: &TrainSet<f32>,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    data.validate(state.model.num_actions())?;
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut logs = Vec::new();
    while state.epoch < end {
        let started = Instant::now();
        let epoch = state.epoch + 1;
        let epoch_cfg = cfg.for_epoch(epoch);
        let triplet = epoch_cfg.ant_loss == AntLossMode::Triplet && epoch_cfg.weights.uses_inactive();
        let mut order: Vec<usize> = (0..data.samples.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let negatives: Vec<Option<usize>> = if triplet {
                (0..batch.len()).map(|i| negative_for(data, batch, i, &mut state.rng)).collect()
            } else {
                Vec::new()
            };
            let mut tape = Tape::new();
            let bound = state.model.bind(&mut tape, true);
            let out = combined_loss(&mut tape, &state.model, &bound, data, batch, &negatives, &epoch_cfg)?;
            let br = &out.breakdown;
            if !br.total.is_finite() {
                let dump = write_dump(opts.checkpoint_dir.as_deref(), epoch, b, batch, br);
                return Err(Error::NonFiniteLoss { epoch, batch: b, dump });
            }
            tape.backward(out.total)?;
            let grads = state.model.params().collect_grads(&tape, bound.vars());
            drop(tape);
            // ReLU maps NaN to zero, so a bad input can leave the loss
            // finite while poisoning the gradients.
            if !grads.iter().all(Tensor::all_finite) {
                let dump = write_dump(opts.checkpoint_dir.as_deref(), epoch, b, batch, br);
                return Err(Error::NonFiniteLoss { epoch, batch: b, dump });
            }
            state.adam.step(state.model.params_mut().tensors_mut(), &grads)?;
            state.model.fold_bn_stats(&out.bn_stats);
            state.step += 1;
            batches += 1;
            let n = br.items as f64;
            sums.total += br.total * n;
            sums.cls += br.cls * n;
            sums.ant += br.ant * br.paired as f64;
            sums.aux += br.aux * br.paired as f64;
            sums.items += br.items;
            sums.paired += br.paired;
            sums.correct += br.correct;
        }
        state.epoch = epoch;
        let per = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        let log = EpochLog {
            epoch,
            batches,
            loss: per(sums.total, sums.items),
            cls: per(sums.cls, sums.items),
            ant: per(sums.ant, sums.paired),
            aux: per(sums.aux, sums.paired),
            accuracy: per(sums.correct as f64, sums.items),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4} ant {:.4} aux {:.4}) acc {:.3} in {:.1}s",
            log.loss,
            log.cls,
            log.ant,
            log.aux,
            log.accuracy,
            started.elapsed().as_secs_f64()
        );
        if let Some(path) = &opts.log_path {
            append_line(path, &log)?;
        }
        if let Some(root) = &opts.checkpoint_dir {
            save_checkpoint(&epoch_dir(root, epoch), state, &opts.config_snapshot, &opts.config_hash)?;
            if epoch == cfg.epochs {
                save_checkpoint(&root.join("final"), state, &opts.config_snapshot, &opts.config_hash)?;
            }
        }
        logs.push(log);
    }
    Ok(logs)
}

fn append_line<S: Serialize>(path: &Path, record: &S) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

/// An image with one target map per action, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSample {
    pub image: Tensor<f32>,
    pub target: Tensor<f32>,
}

/// Trains the supervised heatmap baseline with binary cross-entropy;
/// returns the mean loss of every epoch.
pub fn fit_img2heatmap(net: &mut Img2Heatmap<f32>, data: &[HeatmapSample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no heatmap samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() },
        net.params().tensors(),
    );
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Tensor<f32>> = batch.iter().map(|&i| data[i].image.clone()).collect();
            let targets: Vec<Tensor<f32>> = batch.iter().map(|&i| data[i].target.clone()).collect();
            let mut tape = Tape::new();
            let vars = net.params().bind(&mut tape, true);
            let x = tape.constant(Tensor::stack(&images)?);
            let loss = net.loss(&mut tape, &vars, x, &Tensor::stack(&targets)?)?;
            let value = f64::from(tape.value(loss).item());
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, dump: None });
            }
            total += value * batch.len() as f64;
            tape.backward(loss)?;
            let grads = net.params().collect_grads(&tape, &vars);
            adam.step(net.params_mut().tensors_mut(), &grads)?;
        }
        let mean = total / data.len() as f64;
        log::info!("img2heatmap epoch {epoch}: bce {mean:.5}");
        losses.push(mean);
    }
    Ok(losses)
}
