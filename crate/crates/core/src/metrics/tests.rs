use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::hotspot::center_bias_map;

fn map(w: usize, h: usize, v: &[f64]) -> Heatmap {
    Heatmap::new(w, h, v.to_vec()).unwrap().to_unit_sum()
}

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Heatmap {
    // a coarse alphabet half of the time exercises tied values
    let coarse = rng.random_bool(0.5);
    let v: Vec<f64> = (0..w * h)
        .map(|_| if coarse { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..1.0f64).powi(3) })
        .collect();
    Heatmap::new(w, h, v).unwrap().to_unit_sum()
}

fn kld_oracle(pred: &[f64], gt: &[f64], eps: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..gt.len() {
        if gt[i] != 0.0 {
            s += gt[i] * (gt[i] / (pred[i] + eps) + eps).ln();
        }
    }
    s
}

fn sim_oracle(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..gt.len() {
        s += if pred[i] < gt[i] { pred[i] } else { gt[i] };
    }
    s
}

/// Enumerates every distinct prediction value at a positive as a
/// threshold and integrates the resulting ROC polyline.
fn auc_oracle(pred: &[f64], gt: &[f64], thr: f64) -> f64 {
    let gmax = gt.iter().cloned().fold(0.0, f64::max);
    let pos: Vec<bool> = gt.iter().map(|g| g / gmax >= thr).collect();
    let n_pos = pos.iter().filter(|p| **p).count() as f64;
    let n_neg = pos.len() as f64 - n_pos;
    let mut thresholds: Vec<f64> = (0..pred.len()).filter(|&i| pos[i]).map(|i| pred[i]).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for v in thresholds {
        let tp = (0..pred.len()).filter(|&i| pos[i] && pred[i] >= v).count() as f64;
        let fp = (0..pred.len()).filter(|&i| !pos[i] && pred[i] >= v).count() as f64;
        pts.push((fp / n_neg, tp / n_pos));
    }
    pts.push((1.0, 1.0));
    let mut area = 0.0;
    for k in 1..pts.len() {
        area += (pts[k].0 - pts[k - 1].0) * (pts[k].1 + pts[k - 1].1) / 2.0;
    }
    area
}

#[test]
fn metrics_match_brute_force_oracles() {
    let cfg = MetricsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked_auc = 0;
    for _ in 0..1000 {
        let (p, g) = (random_map(&mut rng, 8, 8), random_map(&mut rng, 8, 8));
        assert!((kld(&p, &g, &cfg).unwrap() - kld_oracle(p.data(), g.data(), 1e-12)).abs() <= 1e-9);
        assert!((sim(&p, &g).unwrap() - sim_oracle(p.data(), g.data())).abs() <= 1e-9);
        if let Ok(a) = auc_judd(&p, &g, &cfg) {
            assert!((a - auc_oracle(p.data(), g.data(), 0.5)).abs() <= 1e-9);
            checked_auc += 1;
        }
    }
    assert!(checked_auc > 900);
}

#[test]
fn anchor_values() {
    let cfg = MetricsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let p = random_map(&mut rng, 8, 8);
        assert!(kld(&p, &p, &cfg).unwrap().abs() <= 1e-9);
        assert!((sim(&p, &p).unwrap() - 1.0).abs() <= 1e-9);
        let constant = Heatmap::uniform(8, 8).unwrap();
        if let Ok(a) = auc_judd(&constant, &p, &cfg) {
            assert!((a - 0.5).abs() <= 1e-9);
        }
    }
}

#[test]
fn kld_hand_values() {
    let cfg = MetricsConfig::default();
    let n = 16;
    let mut delta = vec![0.0; n];
    delta[5] = 1.0;
    let gt = map(4, 4, &delta);
    let uniform = Heatmap::uniform(4, 4).unwrap();
    assert!((kld(&uniform, &gt, &cfg).unwrap() - (n as f64).ln()).abs() < 1e-9);
    let a = map(2, 1, &[0.9, 0.1]);
    let b = map(2, 1, &[0.5, 0.5]);
    assert!((kld(&a, &b, &cfg).unwrap() - kld(&b, &a, &cfg).unwrap()).abs() > 1e-3);
    let flipped = MetricsConfig { kld_direction: KldDirection::PredGt, ..cfg.clone() };
    assert!((kld(&a, &b, &flipped).unwrap() - kld(&b, &a, &cfg).unwrap()).abs() < 1e-15);
    let raw = Heatmap::new(2, 1, vec![1.0, 1.0]).unwrap();
    assert!(matches!(kld(&raw, &b, &cfg), Err(Error::NotNormalized(_))));
}

#[test]
fn sim_hand_values() {
    let uniform = Heatmap::uniform(2, 2).unwrap();
    let gt = map(2, 2, &[0.5, 0.5, 0.0, 0.0]);
    assert!((sim(&uniform, &gt).unwrap() - 0.5).abs() < 1e-12);
    let disjoint = map(2, 2, &[0.0, 0.0, 1.0, 1.0]);
    assert_eq!(sim(&disjoint, &gt).unwrap(), 0.0);
    assert_eq!(sim(&gt, &uniform).unwrap(), sim(&uniform, &gt).unwrap());
    // moving mass off the ground-truth support lowers SIM
    let near = map(2, 2, &[0.4, 0.4, 0.1, 0.1]);
    let far = map(2, 2, &[0.2, 0.2, 0.3, 0.3]);
    assert!(sim(&near, &gt).unwrap() > sim(&far, &gt).unwrap());
}

#[test]
fn auc_hand_values() {
    let cfg = MetricsConfig::default();
    let binary = map(3, 1, &[0.0, 1.0, 0.0]);
    assert!((auc_judd(&binary, &binary, &cfg).unwrap() - 1.0).abs() < 1e-12);
    // one positive ranked second of nine: one negative outranks it
    let mut gt = vec![0.0; 9];
    gt[4] = 1.0;
    let pred = [0.1, 0.2, 0.3, 0.9, 0.8, 0.05, 0.15, 0.25, 0.35];
    let a = auc_judd(&map(3, 3, &pred), &map(3, 3, &gt), &cfg).unwrap();
    assert!((a - auc_oracle(&pred, &gt, 0.5)).abs() < 1e-12);
    assert!((a - (0.5 / 8.0 + 7.0 / 8.0)).abs() < 1e-12);
    let empty = Heatmap::new(3, 1, vec![0.0; 3]).unwrap();
    assert!(matches!(auc_judd(&binary, &empty, &cfg), Err(Error::DegenerateGroundTruth(_))));
    let full = Heatmap::uniform(3, 1).unwrap();
    assert!(auc_judd(&binary, &full, &cfg).is_err());
}

#[test]
fn keypoint_heatmaps() {
    let sigma = 0.25 * 9.0;
    let center = keypoints_to_heatmap(&[[4.0, 4.0]], sigma, 9, 9).unwrap();
    let bias = center_bias_map(9, 9, 0.25).unwrap();
    let diff = center.data().iter().zip(bias.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-15);
    let twice = keypoints_to_heatmap(&[[2.0, 3.0], [2.0, 3.0]], 1.5, 9, 9).unwrap();
    let once = keypoints_to_heatmap(&[[2.0, 3.0]], 1.5, 9, 9).unwrap();
    let diff = twice.data().iter().zip(once.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-15);
    let two = keypoints_to_heatmap(&[[2.0, 2.0], [12.0, 10.0]], 1.0, 16, 16).unwrap();
    for (px, py) in [(2usize, 2usize), (12, 10)] {
        let v = two.get(px, py);
        for (dx, dy) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
            assert!(v > two.get((px as i32 + dx) as usize, (py as i32 + dy) as usize));
        }
    }
    assert!(keypoints_to_heatmap(&[], 1.0, 4, 4).is_err());
    assert!(keypoints_to_heatmap(&[[5.0, 0.0]], 1.0, 4, 4).is_err());
}

#[test]
fn union_properties() {
    let a = keypoints_to_heatmap(&[[1.0, 1.0]], 0.7, 10, 10).unwrap();
    let b = keypoints_to_heatmap(&[[8.0, 8.0]], 0.7, 10, 10).unwrap();
    let c = keypoints_to_heatmap(&[[5.0, 2.0]], 1.5, 10, 10).unwrap();
    let close = |x: &Heatmap, y: &Heatmap| x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() < 1e-15);
    assert!(close(&union_gt(std::slice::from_ref(&a)).unwrap(), &a));
    assert!(close(&union_gt(&[a.clone(), a.clone()]).unwrap(), &a));
    assert!(close(
        &union_gt(&[a.clone(), b.clone(), c.clone()]).unwrap(),
        &union_gt(&[c.clone(), a.clone(), b.clone()]).unwrap()
    ));
    let u = union_gt(&[a.clone(), b.clone()]).unwrap();
    assert!((u.get(1, 1) - u.get(8, 8)).abs() < 1e-15);
    assert!(u.get(1, 1) > u.get(4, 4));
    let small = Heatmap::uniform(3, 3).unwrap();
    assert!(union_gt(&[a, small]).is_err());
    assert!(union_gt(&[]).is_err());
}

fn ann(image: &str, action: &str, annotator: u32, points: &[[f64; 2]]) -> KeypointAnnotation {
    KeypointAnnotation { image: image.into(), action: action.into(), annotator, points: points.to_vec() }
}

#[test]
fn evaluate_perfect_and_fixture_means() {
    let cfg = MetricsConfig::default();
    let anns = vec![
        ann("i0", "push", 0, &[[3.0, 4.0]]),
        ann("i0", "push", 1, &[[5.0, 4.0]]),
        ann("i1", "push", 0, &[[10.0, 10.0]]),
        ann("i1", "pull", 0, &[[2.0, 12.0]]),
    ];
    let sigma = cfg.gt_sigma_frac * 16.0;
    let gt = |points: &[[f64; 2]]| keypoints_to_heatmap(points, sigma, 16, 16).unwrap();
    let mut perfect = BTreeMap::new();
    perfect.insert(("i0".into(), "push".into()), union_gt(&[gt(&[[3.0, 4.0]]), gt(&[[5.0, 4.0]])]).unwrap());
    perfect.insert(("i1".into(), "push".into()), gt(&[[10.0, 10.0]]));
    perfect.insert(("i1".into(), "pull".into()), gt(&[[2.0, 12.0]]));
    let r = evaluate(&perfect, &anns, &cfg, false).unwrap();
    assert_eq!(r.count, 3);
    assert!(r.kld.abs() < 1e-9 && (r.sim - 1.0).abs() < 1e-9 && (r.auc - 1.0).abs() < 1e-9);

    let mut preds = BTreeMap::new();
    preds.insert(("i0".into(), "push".into()), center_bias_map(16, 16, 0.25).unwrap());
    preds.insert(("i1".into(), "push".into()), Heatmap::uniform(16, 16).unwrap());
    preds.insert(("i1".into(), "pull".into()), gt(&[[3.0, 11.0]]));
    let r = evaluate(&preds, &anns, &cfg, false).unwrap();
    let hand: Vec<(f64, f64, f64)> = r
        .pairs
        .iter()
        .map(|p| {
            let key = (p.image.clone(), p.action.clone());
            let g = if key.0 == "i0" {
                union_gt(&[gt(&[[3.0, 4.0]]), gt(&[[5.0, 4.0]])]).unwrap()
            } else if key.1 == "push" {
                gt(&[[10.0, 10.0]])
            } else {
                gt(&[[2.0, 12.0]])
            };
            let pr = &preds[&key];
            (
                kld_oracle(pr.data(), g.data(), 1e-12),
                sim_oracle(pr.data(), g.data()),
                auc_oracle(pr.data(), g.data(), 0.5),
            )
        })
        .collect();
    let mean = |f: fn(&(f64, f64, f64)) -> f64| hand.iter().map(f).sum::<f64>() / 3.0;
    assert!((r.kld - mean(|h| h.0)).abs() < 1e-12);
    assert!((r.sim - mean(|h| h.1)).abs() < 1e-12);
    assert!((r.auc - mean(|h| h.2)).abs() < 1e-12);
}

#[test]
fn evaluate_missing_policy() {
    let cfg = MetricsConfig::default();
    let anns = vec![ann("i0", "push", 0, &[[3.0, 4.0]]), ann("i1", "push", 0, &[[3.0, 4.0]])];
    let mut preds = BTreeMap::new();
    preds.insert(("i0".to_string(), "push".to_string()), Heatmap::uniform(8, 8).unwrap());
    match evaluate(&preds, &anns, &cfg, false) {
        Err(Error::MissingPredictions(m)) => assert_eq!(m, vec![("i1".to_string(), "push".to_string())]),
        other => panic!("{other:?}"),
    }
    let r = evaluate(&preds, &anns, &cfg, true).unwrap();
    assert_eq!(r.count, 1);
    assert_eq!(r.missing.len(), 1);
}

proptest::proptest! {
    #[test]
    fn kld_is_nonnegative(a in proptest::collection::vec(0.01f64..1.0, 16), b in proptest::collection::vec(0.01f64..1.0, 16)) {
        let cfg = MetricsConfig::default();
        let (p, q) = (map(4, 4, &a), map(4, 4, &b));
        proptest::prop_assert!(kld(&p, &q, &cfg).unwrap() >= -1e-9);
        let s = sim(&p, &q).unwrap();
        proptest::prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
    }
}
