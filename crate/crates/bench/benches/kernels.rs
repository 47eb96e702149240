use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, Criterion};
use htk_core::hotspot::{predict_hotspots, Heatmap, HotspotConfig};
use htk_core::metrics::{auc_judd, kld, sim, MetricsConfig};
use htk_core::net::{HotspotModel, ModelConfig};
use htk_core::tensor::Conv2dSpec;
use htk_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_map(side: usize, rng: &mut ChaCha8Rng) -> Heatmap {
    let data = (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect();
    Heatmap::new(side, side, data).unwrap().to_unit_sum()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[8, 16, 16, 16], &mut rng);
    let w = random(&[16, 16, 3, 3], &mut rng);
    let spec = Conv2dSpec { stride: 1, padding: 2, dilation: 2 };
    c.bench_function("conv2d_dilated_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv2d(xv, wv, None, spec).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(wv))
        })
    });
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let actions: Vec<String> = (0..3).map(|i| format!("a{i}")).collect();
    let objects: Vec<String> = (0..4).map(|i| format!("o{i}")).collect();
    let m = HotspotModel::<f32>::new(ModelConfig::default(), actions, objects, &mut rng).unwrap();
    let image = random(&[3, 64, 64], &mut rng).map(|v| v.abs());
    let clip = random(&[8, 3, 64, 64], &mut rng).map(|v| v.abs());
    c.bench_function("encode_frame_64", |b| b.iter(|| black_box(m.encode_frame(&image).unwrap())));
    c.bench_function("classify_clip_t8", |b| b.iter(|| black_box(m.classify_clip(&clip).unwrap())));
    let cfg = HotspotConfig::default();
    c.bench_function("predict_hotspots_k3", |b| {
        b.iter(|| black_box(predict_hotspots(&m, "img", &image, &cfg).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = MetricsConfig::default();
    let pairs: BTreeMap<usize, (Heatmap, Heatmap)> =
        (0..16).map(|i| (i, (random_map(64, &mut rng), random_map(64, &mut rng)))).collect();
    c.bench_function("kld_sim_auc_64x64_x16", |b| {
        b.iter(|| {
            for (p, g) in pairs.values() {
                black_box(kld(p, g, &cfg).unwrap());
                black_box(sim(p, g).unwrap());
                black_box(auc_judd(p, g, &cfg).ok());
            }
        })
    });
}

criterion_group!(benches, conv, model, metrics);
criterion_main!(benches);
