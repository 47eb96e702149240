use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.json");

fn htk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htk")).args(args).env("RUST_LOG", "warn").output().expect("failed to launch htk")
}

fn ok(args: &[&str]) -> String {
    let out = htk(args);
    assert!(out.status.success(), "htk {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
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
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn dataset(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    ok(&["gen-data", "--config", TINY, "--out", s(&d)]);
    d
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--config", TINY, "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn help_lists_flags_and_unknown_flags_fail() {
    let out = htk(&["train", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--config",
        "--set",
        "--data",
        "--out",
        "--variant",
        "--novel-holdout",
        "--resume",
        "--seed",
        "--epochs",
        "--anticipation-loss",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    let out = htk(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(htk(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn gen_data_is_reproducible_and_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--config", TINY, "--out", s(&a), "--seed", "7"]);
    ok(&["gen-data", "--config", TINY, "--out", s(&b), "--seed", "7"]);
    assert_eq!(files(&a), files(&b));

    let out = htk(&["gen-data", "--out", s(&tmp.path().join("c")), "--set", "data.widgets=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.widgets"));
}

#[test]
fn default_config_writes_the_full_clip_count() {
    // Generation only; 4 objects × 3 actions × (60 + 15) clips.
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    ok(&["gen-data", "--out", s(&d), "--set", "data.frames=3", "--set", "data.image_size=16"]);
    let m = json(&d.join("manifest.json"));
    assert_eq!(m["clips"].as_array().unwrap().len(), 4 * 3 * 75);
}

#[test]
fn train_predict_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let run = tmp.path().join("run");
    train(&data, &run, &[]);
    let hash = json(&run.join("run.json"))["config_hash"].as_str().unwrap().to_string();
    assert_eq!(json(&run.join("summary.json"))["config_hash"], hash.as_str());

    let (p1, p2) = (tmp.path().join("p1"), tmp.path().join("p2"));
    for p in [&p1, &p2] {
        ok(&["predict", "--checkpoint", s(&run.join("final")), "--data", s(&data), "--out", s(p)]);
    }
    let pred = files(&p1);
    assert_eq!(pred, files(&p2));
    let index = json(&p1.join("index.json"));
    assert_eq!(index["config_hash"], hash.as_str());
    for img in index["images"].as_array().unwrap() {
        let pgms = img["pgm"].as_array().unwrap();
        assert_eq!(pgms.len(), 3);
        for f in pgms {
            let body = &pred[f.as_str().unwrap()];
            assert!(body.starts_with(b"P5\n16 16\n255\n"));
            assert_eq!(body.len(), 13 + 16 * 16);
        }
    }

    let report = tmp.path().join("report.json");
    ok(&["eval", "--data", s(&data), "--predictions", s(&p1), "--report", s(&report)]);
    let r = json(&report);
    assert_eq!(r["rows"][0]["config_hash"], hash.as_str());
    let again = tmp.path().join("again.json");
    ok(&["eval", "--data", s(&data), "--predictions", s(&p1), "--report", s(&again)]);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&again).unwrap());

    let center = tmp.path().join("center.json");
    ok(&["eval", "--config", TINY, "--data", s(&data), "--baseline", "center", "--report", s(&center)]);
    let row = &json(&center)["rows"][0];
    for key in ["kld", "sim", "auc"] {
        assert!(row[key].as_f64().is_some_and(f64::is_finite), "{key}: {row}");
    }

    // Grad-CAM is defined for video-only checkpoints.
    let out = htk(&["eval", "--data", s(&data), "--baseline", "gradcam", "--checkpoint", s(&run.join("final"))]);
    assert_eq!(out.status.code(), Some(1));

    let (c1, c2) = (tmp.path().join("c1"), tmp.path().join("c2"));
    for c in [&c1, &c2] {
        ok(&["cluster", "--checkpoint", s(&run.join("final")), "--data", s(&data), "--out", s(c)]);
    }
    assert_eq!(files(&c1), files(&c2));
    let merges = json(&c1.join("merges.json"));
    assert_eq!(merges["config_hash"], hash.as_str());
    let heights: Vec<f64> =
        merges["dendrogram"]["merges"].as_array().unwrap().iter().map(|m| m["height"].as_f64().unwrap()).collect();
    assert_eq!(heights.len(), 3);
    assert!(heights.windows(2).all(|w| w[0] <= w[1]), "{heights:?}");
}

#[test]
fn missing_predictions_fail_unless_allowed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let run = tmp.path().join("run");
    train(&data, &run, &["--epochs", "1"]);
    let p = tmp.path().join("p");
    ok(&["predict", "--checkpoint", s(&run.join("final")), "--data", s(&data), "--out", s(&p), "--objects", "mug"]);
    let all = ["eval", "--data", s(&data), "--predictions", s(&p), "--objects", "mug,lamp"];
    assert_eq!(htk(&all).status.code(), Some(1));
    let mut allowed = all.to_vec();
    allowed.push("--allow-missing");
    assert!(ok(&allowed).contains("missing"));
}

#[test]
fn variant_basic_is_the_video_only_strided_rung() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let run = tmp.path().join("run");
    train(&data, &run, &["--variant", "basic", "--epochs", "1"]);
    let spec = &json(&run.join("run.json"))["spec"];
    assert_eq!(spec["variant"], "basic");
    let cfg = &spec["config"];
    assert_eq!(cfg["model"]["pool"], "avg");
    assert_eq!(cfg["model"]["anticipation"], false);
    assert_eq!(cfg["train"]["weights"]["ant"], 0.0);
    assert_eq!(cfg["train"]["weights"]["aux"], 0.0);
    assert!(cfg["model"]["encoder"]["stages"].as_array().unwrap().iter().all(|s| s["dilation"] == 1));

    // A video-only checkpoint supports the Grad-CAM baseline.
    ok(&["eval", "--data", s(&data), "--baseline", "gradcam", "--checkpoint", s(&run.join("final"))]);

    let full = tmp.path().join("full");
    train(&data, &full, &["--variant", "full", "--epochs", "1"]);
    let cfg = &json(&full.join("run.json"))["spec"]["config"];
    assert_eq!(cfg["model"]["pool"], "l2");
    assert_eq!(cfg["model"]["anticipation"], true);
    assert!(cfg["train"]["weights"]["ant"].as_f64().unwrap() > 0.0);
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&data, &a, &["--epochs", "3"]);
    train(&data, &b, &["--epochs", "3", "--stop-after", "1"]);
    train(&data, &b, &["--epochs", "3", "--resume", s(&b.join("epoch-001"))]);
    assert_eq!(files(&a), files(&b));

    // A different specification cannot resume the checkpoint.
    let out = htk(&[
        "train",
        "--config",
        TINY,
        "--data",
        s(&data),
        "--out",
        s(&b),
        "--epochs",
        "3",
        "--seed",
        "9",
        "--resume",
        s(&a.join("epoch-001")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let run = tmp.path().join("run");
    let out = htk(&[
        "train",
        "--config",
        TINY,
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--set",
        "train.lr=1e30",
        "--set",
        "train.weight_decay=0",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn novel_object_splits_report_rows_and_a_mean() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let mut args = vec!["eval".to_string(), "--data".into(), s(&data).into()];
    for held in ["kettle", "mug", "lamp"] {
        let run = tmp.path().join(format!("run-{held}"));
        train(&data, &run, &["--epochs", "1", "--novel-holdout", held]);
        let pred = tmp.path().join(format!("pred-{held}"));
        ok(&[
            "predict",
            "--checkpoint",
            s(&run.join("final")),
            "--data",
            s(&data),
            "--out",
            s(&pred),
            "--objects",
            held,
        ]);
        args.extend(["--predictions".into(), s(&pred).into()]);
    }
    let report = tmp.path().join("report.json");
    args.extend(["--report".into(), s(&report).into()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let r = json(&report);
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1]["objects"], serde_json::json!(["mug"]));
    let mean = r["mean"]["auc"].as_f64().unwrap();
    let by_hand = rows.iter().map(|r| r["auc"].as_f64().unwrap()).sum::<f64>() / 3.0;
    assert!((mean - by_hand).abs() < 1e-12);
}
