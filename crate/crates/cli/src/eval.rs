use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, ensure, Result};
use clap::{Args, ValueEnum};
use htk_core::config::RunConfig;
use htk_core::data::{annotations_for, read_annotations, DatasetManifest, InactiveEntry, Split};
use htk_core::hotspot::{center_bias_stack, gradcam_baseline, Heatmap, HotspotStack};
use htk_core::metrics::{evaluate, MetricsConfig};
use htk_core::net::Img2Heatmap;
use htk_core::train::fit_img2heatmap;
use htk_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::common::{check_objects, load_manifest, load_run, write_json};
use crate::predict::PredictionIndex;
use crate::{ConfigArgs, SplitArg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// A centered Gaussian for every action.
    Center,
    /// Grad-CAM on a video-only checkpoint (`--checkpoint`).
    Gradcam,
    /// The supervised image-to-heatmap network, trained on the train split.
    Img2heatmap,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    /// Supplies `metrics.*`, plus `img2heatmap.*` and `train.*` for the
    /// supervised baseline.
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory holding the annotations.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Predictions directory written by `predict`. Repeatable; each one is
    /// a row of the report, followed by a mean row.
    #[arg(long, value_name = "DIR", required_unless_present = "baseline", conflicts_with = "baseline")]
    pub predictions: Vec<PathBuf>,
    /// Synthesize predictions from a baseline instead.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Checkpoint for the Grad-CAM baseline.
    #[arg(long, required_if_eq("baseline", "gradcam"))]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated object classes to score. Defaults to a run's
    /// held-out classes, or every class.
    #[arg(long, value_delimiter = ',', value_name = "CLASSES")]
    pub objects: Vec<String>,
    /// Report unpredicted annotated pairs instead of failing.
    #[arg(long)]
    pub allow_missing: bool,
    /// Write the report as JSON.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub config_hash: String,
    /// Classes scored; every class when empty.
    pub objects: Vec<String>,
    pub kld: f64,
    pub sim: f64,
    pub auc: f64,
    /// Fraction of afforded (image, action) pairs whose map peaks inside
    /// the action's part.
    pub loc: f64,
    pub count: usize,
    pub auc_count: usize,
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_hash: String,
    pub split: Split,
    pub metrics: MetricsConfig,
    pub rows: Vec<EvalRow>,
    /// Unweighted mean of the rows when there is more than one.
    pub mean: Option<EvalRow>,
}

type Predictions = BTreeMap<(String, String), Heatmap>;

struct Scorer<'a> {
    entries: BTreeMap<&'a str, &'a InactiveEntry>,
    annotations: Vec<htk_core::metrics::KeypointAnnotation>,
    metrics: &'a MetricsConfig,
    allow_missing: bool,
}

impl Scorer<'_> {
    fn row(&self, name: String, config_hash: String, objects: Vec<String>, preds: &Predictions) -> Result<EvalRow> {
        let keep =
            |image: &str| objects.is_empty() || self.entries.get(image).is_some_and(|e| objects.contains(&e.object));
        let anns: Vec<_> = self.annotations.iter().filter(|a| keep(&a.image)).cloned().collect();
        ensure!(!anns.is_empty(), "no annotated images for classes {objects:?}");
        let preds: Predictions =
            preds.iter().filter(|((image, _), _)| keep(image)).map(|(k, v)| (k.clone(), v.clone())).collect();
        let report = evaluate(&preds, &anns, self.metrics, self.allow_missing)?;
        let (mut hits, mut total) = (0usize, 0usize);
        for ((image, action), map) in &preds {
            let Some(part) = self.entries.get(image.as_str()).and_then(|e| e.hotspots.get(action)) else {
                continue;
            };
            let (x, y) = map.argmax();
            hits += usize::from(part.contains(x as f64, y as f64));
            total += 1;
        }
        let row = EvalRow {
            name,
            config_hash,
            objects,
            kld: report.kld,
            sim: report.sim,
            auc: report.auc,
            loc: if total == 0 { f64::NAN } else { hits as f64 / total as f64 },
            count: report.count,
            auc_count: report.auc_count,
            missing: report.missing.len(),
        };
        for (image, action) in &report.missing {
            log::warn!("missing prediction for {image}/{action}");
        }
        Ok(row)
    }
}

fn insert_stacks(stacks: Vec<HotspotStack>, actions: &[String]) -> Predictions {
    let mut out = BTreeMap::new();
    for s in stacks {
        for (a, m) in actions.iter().zip(s.maps) {
            out.insert((s.image.clone(), a.clone()), m);
        }
    }
    out
}

fn mean_row(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len() as f64;
    let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    EvalRow {
        name: "mean".into(),
        config_hash: String::new(),
        objects: rows.iter().flat_map(|r| r.objects.iter().cloned()).collect(),
        kld: avg(|r| r.kld),
        sim: avg(|r| r.sim),
        auc: avg(|r| r.auc),
        loc: avg(|r| r.loc),
        count: rows.iter().map(|r| r.count).sum(),
        auc_count: rows.iter().map(|r| r.auc_count).sum(),
        missing: rows.iter().map(|r| r.missing).sum(),
    }
}

fn print_row(r: &EvalRow) {
    println!(
        "{:<28} kld {:.4}  sim {:.4}  auc {:.4}  loc {:.3}  pairs {}{}",
        r.name,
        r.kld,
        r.sim,
        r.auc,
        r.loc,
        r.count,
        if r.missing > 0 { format!("  missing {}", r.missing) } else { String::new() }
    );
}

fn baseline_row(
    args: &EvalArgs,
    cfg: &RunConfig,
    baseline: Baseline,
    manifest: &DatasetManifest,
    scorer: &Scorer,
) -> Result<EvalRow> {
    let split: Split = args.split.into();
    let images = manifest.load_inactive(&args.data, split)?;
    let k = manifest.actions.len();
    let (stacks, config_hash, mut objects) = match baseline {
        Baseline::Center => {
            let s = manifest.config.image_size;
            let stacks = images
                .iter()
                .map(|(e, _)| center_bias_stack(&e.id, s, s, k, &cfg.hotspot))
                .collect::<htk_core::Result<Vec<_>>>()?;
            (stacks, cfg.hash(), Vec::new())
        }
        Baseline::Gradcam => {
            let Some(dir) = &args.checkpoint else {
                bail!("--baseline gradcam needs --checkpoint");
            };
            let (state, spec, hash) = load_run(dir)?;
            let w = &spec.config.train.weights;
            ensure!(
                w.ant == 0.0 && w.aux == 0.0,
                "the Grad-CAM baseline needs a video-only checkpoint (zero anticipation and auxiliary weights)"
            );
            let stacks = images
                .par_iter()
                .map(|(e, img)| gradcam_baseline(&state.model, &e.id, img, &spec.config.hotspot))
                .collect::<htk_core::Result<Vec<_>>>()?;
            (stacks, hash, spec.novel_holdout)
        }
        Baseline::Img2heatmap => {
            let anns = read_annotations(&args.data)?;
            let samples = manifest.heatmap_samples(&args.data, Split::Train, &anns, cfg.metrics.gt_sigma_frac)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let mut net = Img2Heatmap::<f32>::new(cfg.img2heatmap.clone(), manifest.actions.clone(), &mut rng)?;
            let losses = fit_img2heatmap(&mut net, &samples, &cfg.train)?;
            log::info!("img2heatmap trained on {} images, final loss {:?}", samples.len(), losses.last());
            let stacks = images
                .par_iter()
                .map(|(e, img)| {
                    let y: Tensor<f32> = net.predict(img)?;
                    let maps = (0..k)
                        .map(|a| Ok(Heatmap::from_tensor(&y.index_axis0(a)?)?.to_unit_sum()))
                        .collect::<htk_core::Result<Vec<_>>>()?;
                    Ok(HotspotStack { image: e.id.clone(), maps })
                })
                .collect::<htk_core::Result<Vec<_>>>()?;
            (stacks, cfg.hash(), Vec::new())
        }
    };
    if !args.objects.is_empty() {
        objects = args.objects.clone();
    }
    let name = match baseline {
        Baseline::Center => "center-bias",
        Baseline::Gradcam => "lstm+grad-cam",
        Baseline::Img2heatmap => "img2heatmap",
    };
    scorer.row(name.into(), config_hash, objects, &insert_stacks(stacks, &manifest.actions))
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    let cfg = args.config.load()?;
    let manifest = load_manifest(&args.data)?;
    check_objects(&manifest, &args.objects)?;
    let split: Split = args.split.into();
    let annotations = annotations_for(&manifest, split, &read_annotations(&args.data)?);
    let scorer = Scorer {
        entries: manifest.inactive_in(split).map(|e| (e.id.as_str(), e)).collect(),
        annotations,
        metrics: &cfg.metrics,
        allow_missing: args.allow_missing,
    };
    let dataset_hash = manifest.hash()?;
    let mut rows = Vec::new();
    if let Some(b) = args.baseline {
        rows.push(baseline_row(args, &cfg, b, &manifest, &scorer)?);
    }
    for dir in &args.predictions {
        let index = PredictionIndex::load(dir)?;
        ensure!(
            index.dataset_hash == dataset_hash,
            "{} was predicted on dataset {}, {} is {dataset_hash}",
            dir.display(),
            index.dataset_hash,
            args.data.display()
        );
        ensure!(index.actions == manifest.actions, "{}: action list differs from the dataset", dir.display());
        let stacks = index
            .images
            .par_iter()
            .map(|img| Ok(HotspotStack { image: img.id.clone(), maps: index.read_maps(dir, img)? }))
            .collect::<Result<Vec<_>>>()?;
        let objects = if args.objects.is_empty() { index.novel_holdout.clone() } else { args.objects.clone() };
        rows.push(scorer.row(
            dir.display().to_string(),
            index.config_hash.clone(),
            objects,
            &insert_stacks(stacks, &manifest.actions),
        )?);
    }
    let mean = (rows.len() > 1).then(|| mean_row(&rows));
    rows.iter().chain(&mean).for_each(print_row);
    let report = EvalReport { dataset_hash, split, metrics: cfg.metrics.clone(), rows, mean };
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(report)
}
