use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use htk_core::data::{gen_dataset, read_annotations, GenConfig, Split};
use htk_core::net::{EncoderConfig, HotspotModel, Img2Heatmap, Img2HeatmapConfig, ModelConfig, StageConfig, Trainable};
use htk_core::train::{
    check_combined_loss_gradients, combined_loss, fit, fit_img2heatmap, load_checkpoint, AntLossMode, FitOptions,
    LossWeights, Sample, TrainConfig, TrainSet, TrainState,
};
use htk_core::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stage(out_channels: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> StageConfig {
    StageConfig { out_channels, kernel, stride, dilation, padding }
}

/// d = 4, n = 2 on 8×8 images.
fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        encoder: EncoderConfig {
            stages: vec![stage(3, 4, 4, 1, 0), stage(4, 3, 1, 1, 1), stage(4, 3, 1, 2, 2)],
            feature_channels: 4,
            feature_resolution: 2,
        },
        ..ModelConfig::default()
    }
}

/// d = 8, n = 4 on 16×16 images.
fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        encoder: EncoderConfig {
            stages: vec![stage(6, 3, 2, 1, 1), stage(8, 3, 2, 1, 1), stage(8, 3, 1, 1, 1), stage(8, 3, 1, 2, 2)],
            feature_channels: 8,
            feature_resolution: 4,
        },
        ..ModelConfig::default()
    }
}

fn names(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}{i}")).collect()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Three T = 2 clips, one per action, over two objects.
fn tiny_batch(seed: u64) -> (HotspotModel<f64>, TrainSet<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = HotspotModel::new(tiny_config(), names("a", 3), names("o", 2), &mut rng).unwrap();
    let samples = (0..3)
        .map(|a| Sample { clip: random(&[2, 3, 8, 8], &mut rng), action: a, object: a % 2, inactive: Some(a % 2) })
        .collect();
    let set = TrainSet {
        samples,
        inactive: vec![random(&[3, 8, 8], &mut rng), random(&[3, 8, 8], &mut rng)],
        inactive_object: vec![0, 1],
    };
    (model, set)
}

fn grads(
    model: &HotspotModel<f64>,
    set: &TrainSet<f64>,
    negatives: &[Option<usize>],
    cfg: &TrainConfig,
) -> BTreeMap<String, f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let out = combined_loss(&mut tape, model, &bound, set, &[0, 1, 2], negatives, cfg).unwrap();
    tape.backward(out.total).unwrap();
    let g = model.params().collect_grads(&tape, bound.vars());
    model
        .params()
        .names()
        .iter()
        .zip(g)
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.abs()).fold(0.0, f64::max)))
        .collect()
}

#[test]
fn combined_loss_gradients_match_finite_differences() {
    let (model, set) = tiny_batch(1);
    let cfg = TrainConfig::default();
    let r = check_combined_loss_gradients(&model, &set, &[0, 1, 2], &[], &cfg, 1e-5).unwrap();
    assert!(r.compared > 300, "{r:?}");
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn triplet_loss_gradients_match_finite_differences() {
    let (model, set) = tiny_batch(2);
    let cfg = TrainConfig { ant_loss: AntLossMode::Triplet, ..TrainConfig::default() };
    let negatives = [Some(1), Some(0), Some(1)];
    let r = check_combined_loss_gradients(&model, &set, &[0, 1, 2], &negatives, &cfg, 1e-5).unwrap();
    assert!(r.compared > 300, "{r:?}");
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn every_parameter_receives_gradient() {
    let (model, set) = tiny_batch(3);
    for (name, g) in grads(&model, &set, &[], &TrainConfig::default()) {
        assert!(g > 0.0, "{name} has no gradient");
    }
}

#[test]
fn zero_weights_switch_off_the_inactive_branch() {
    let (model, set) = tiny_batch(4);
    let cfg =
        TrainConfig { weights: LossWeights { ant: 0.0, aux: 0.0, ..LossWeights::default() }, ..TrainConfig::default() };
    for (name, g) in grads(&model, &set, &[], &cfg) {
        if name.starts_with("anticipation.") {
            assert_eq!(g, 0.0, "{name}");
        } else {
            assert!(g > 0.0, "{name}");
        }
    }
}

#[test]
fn distillation_target_is_detached() {
    // With only the anticipation loss active, nothing reaches the LSTM or
    // the classifier: the active-frame target carries no gradient.
    let (model, set) = tiny_batch(5);
    let cfg = TrainConfig { weights: LossWeights { cls: 0.0, ant: 1.0, aux: 0.0 }, ..TrainConfig::default() };
    for (name, g) in grads(&model, &set, &[], &cfg) {
        if name.starts_with("lstm.") || name.starts_with("classifier.") {
            assert_eq!(g, 0.0, "{name}");
        } else {
            assert!(g > 0.0, "{name}");
        }
    }
}

fn dataset(root: &Path) -> TrainSet<f32> {
    let cfg =
        GenConfig { seed: 3, image_size: 16, frames: 3, train_per_cell: 2, test_per_cell: 1, ..GenConfig::default() };
    let m = gen_dataset(&cfg, root).unwrap();
    m.load_train_set(root, Split::Train).unwrap()
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn train_cfg() -> TrainConfig {
    TrainConfig { epochs: 3, batch_size: 8, warmup_epochs: 1, ..TrainConfig::default() }
}

fn run(data: &TrainSet<f32>, out: &Path, stop_after: Option<usize>) -> TrainState {
    let cfg = train_cfg();
    let mut st = TrainState::new(small_config(), names("a", 3), names("o", 4), &cfg).unwrap();
    let opts = FitOptions {
        checkpoint_dir: Some(out.to_path_buf()),
        log_path: Some(out.join("log.jsonl")),
        stop_after,
        ..FitOptions::default()
    };
    fit(&mut st, data, &cfg, &opts).unwrap();
    st
}

#[test]
fn training_is_deterministic_and_resumes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"));
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let sa = run(&data, &a, None);
    run(&data, &b, None);
    let fa = files(&a);
    assert!(fa.keys().any(|k| k.starts_with("final")));
    assert_eq!(fa, files(&b));

    run(&data, &c, Some(1));
    assert!(!c.join("final").exists());
    let (mut resumed, manifest) = load_checkpoint(&c.join("epoch-001")).unwrap();
    assert_eq!(manifest.epoch, 1);
    let opts =
        FitOptions { checkpoint_dir: Some(c.clone()), log_path: Some(c.join("log.jsonl")), ..FitOptions::default() };
    fit(&mut resumed, &data, &train_cfg(), &opts).unwrap();
    assert_eq!(resumed.model, sa.model);
    assert_eq!(resumed.step, sa.step);
    assert_eq!(fa, files(&c));
}

#[test]
fn non_finite_input_aborts_with_a_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let mut data = dataset(&tmp.path().join("data"));
    data.samples[0].clip.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig { epochs: 1, batch_size: 64, ..train_cfg() };
    let mut st = TrainState::new(small_config(), names("a", 3), names("o", 4), &cfg).unwrap();
    let opts = FitOptions { checkpoint_dir: Some(tmp.path().join("run")), ..FitOptions::default() };
    match fit(&mut st, &data, &cfg, &opts) {
        Err(Error::NonFiniteLoss { epoch: 1, batch: 0, dump: Some(path) }) => {
            let body: serde_json::Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
            assert!(body["samples"].as_array().is_some_and(|s| !s.is_empty()));
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn img2heatmap_fits_a_few_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    dataset(&root);
    let m = htk_core::data::DatasetManifest::load(&root).unwrap();
    let anns = read_annotations(&root).unwrap();
    let samples: Vec<_> = m.heatmap_samples(&root, Split::Train, &anns, 0.05).unwrap().into_iter().take(6).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = Img2HeatmapConfig { image_size: 16, channels: vec![8, 8] };
    let mut net = Img2Heatmap::<f32>::new(cfg, names("a", 3), &mut rng).unwrap();
    let tc = TrainConfig { epochs: 40, batch_size: 6, lr: 1e-2, ..TrainConfig::default() };
    let losses = fit_img2heatmap(&mut net, &samples, &tc).unwrap();
    assert!(losses[39] < 0.5 * losses[0], "{losses:?}");
}
