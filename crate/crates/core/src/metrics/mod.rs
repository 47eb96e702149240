//! Ground-truth heatmaps from keypoints and the KLD, SIM and AUC-Judd
//! saliency metrics.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hotspot::{gaussian_grid, Heatmap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldDirection {
    /// `KL(gt ‖ pred)`
    #[default]
    GtPred,
    /// `KL(pred ‖ gt)`
    PredGt,
}

/// Which pixels form the AUC false-positive denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucNegatives {
    #[default]
    NonPositive,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Ground-truth Gaussian σ as a fraction of `min(H, W)`.
    pub gt_sigma_frac: f64,
    pub kld_eps: f64,
    pub kld_direction: KldDirection,
    /// Binarization threshold on the unit-max ground truth.
    pub auc_threshold: f64,
    pub auc_negatives: AucNegatives,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            gt_sigma_frac: 0.05,
            kld_eps: 1e-12,
            kld_direction: KldDirection::GtPred,
            auc_threshold: 0.5,
            auc_negatives: AucNegatives::NonPositive,
        }
    }
}

/// Points placed by one annotator on one image for one action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointAnnotation {
    pub image: String,
    pub action: String,
    pub annotator: u32,
    /// `[x, y]` in pixel coordinates.
    pub points: Vec<[f64; 2]>,
}

/// Sum of isotropic Gaussians centered on `points`, unit sum.
pub fn keypoints_to_heatmap(points: &[[f64; 2]], sigma: f64, width: usize, height: usize) -> Result<Heatmap> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no keypoints".into()));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut acc = vec![0.0; width * height];
    for &[x, y] in points {
        if !(0.0..width as f64).contains(&x) || !(0.0..height as f64).contains(&y) {
            return Err(Error::InvalidArgument(format!("keypoint ({x}, {y}) outside {width}x{height}")));
        }
        for (a, g) in acc.iter_mut().zip(gaussian_grid(width, height, x, y, sigma)) {
            *a += g;
        }
    }
    Ok(Heatmap::new(width, height, acc)?.to_unit_sum())
}

/// Pixelwise maximum of all maps, renormalized to unit sum.
pub fn union_gt(maps: &[Heatmap]) -> Result<Heatmap> {
    let Some(first) = maps.first() else {
        return Err(Error::InvalidArgument("no maps to unite".into()));
    };
    let mut acc = first.data().to_vec();
    for m in &maps[1..] {
        if !m.same_shape(first) {
            return Err(Error::shape("union_gt", "maps differ in size"));
        }
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a = a.max(v);
        }
    }
    Ok(Heatmap::new(first.width(), first.height(), acc)?.to_unit_sum())
}

fn check_pair(pred: &Heatmap, gt: &Heatmap, op: &str) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::shape("metric", format!("{op}: prediction and ground truth differ in size")));
    }
    for (which, m) in [("prediction", pred), ("ground truth", gt)] {
        if !m.is_unit_sum() {
            return Err(Error::NotNormalized(format!("{op}: {which} sums to {}", m.sum())));
        }
    }
    Ok(())
}

/// `Σ p·log(p/(q+ε)+ε)` with `(p, q) = (gt, pred)` by default.
pub fn kld(pred: &Heatmap, gt: &Heatmap, cfg: &MetricsConfig) -> Result<f64> {
    check_pair(pred, gt, "kld")?;
    let (p, q) = match cfg.kld_direction {
        KldDirection::GtPred => (gt.data(), pred.data()),
        KldDirection::PredGt => (pred.data(), gt.data()),
    };
    let eps = cfg.kld_eps;
    Ok(p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi / (qi + eps) + eps).ln()).sum())
}

/// Histogram intersection `Σ min(p, q)`.
pub fn sim(pred: &Heatmap, gt: &Heatmap) -> Result<f64> {
    check_pair(pred, gt, "sim")?;
    Ok(pred.data().iter().zip(gt.data()).map(|(a, b)| a.min(*b)).sum())
}

/// AUC-Judd: ROC area with binarized ground truth as positives, one
/// threshold per distinct predicted value at a positive.
pub fn auc_judd(pred: &Heatmap, gt: &Heatmap, cfg: &MetricsConfig) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::shape("metric", "auc_judd: prediction and ground truth differ in size"));
    }
    let gmax = gt.max();
    let positive: Vec<bool> = gt.data().iter().map(|&g| gmax > 0.0 && g / gmax >= cfg.auc_threshold).collect();
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::DegenerateGroundTruth("no positive pixels".into()));
    }
    let n_neg = match cfg.auc_negatives {
        AucNegatives::NonPositive => positive.len() - n_pos,
        AucNegatives::All => positive.len(),
    };
    if n_neg == 0 {
        return Err(Error::DegenerateGroundTruth("no negative pixels".into()));
    }
    // pixels by descending prediction; sweeping a threshold down this
    // order counts hits cumulatively
    let mut order: Vec<usize> = (0..positive.len()).collect();
    order.sort_by(|&a, &b| pred.data()[b].total_cmp(&pred.data()[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let v = pred.data()[order[i]];
        let mut has_positive = false;
        while i < order.len() && pred.data()[order[i]] == v {
            let idx = order[i];
            if positive[idx] {
                tp += 1;
                has_positive = true;
            }
            if !positive[idx] || cfg.auc_negatives == AucNegatives::All {
                fp += 1;
            }
            i += 1;
        }
        if has_positive {
            points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        }
    }
    points.push((1.0, 1.0));
    Ok(points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// Metrics for one `(image, action)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub image: String,
    pub action: String,
    pub kld: f64,
    pub sim: f64,
    /// Absent when the ground truth has no positive pixels.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub kld: f64,
    pub sim: f64,
    pub auc: f64,
    pub count: usize,
    pub auc_count: usize,
    pub missing: Vec<(String, String)>,
}

impl MetricsReport {
    /// Unweighted means over `pairs`.
    pub fn from_pairs(pairs: Vec<PairMetrics>, missing: Vec<(String, String)>) -> Self {
        let count = pairs.len();
        let mean = |f: &dyn Fn(&PairMetrics) -> f64| {
            if count == 0 {
                f64::NAN
            } else {
                pairs.iter().map(f).sum::<f64>() / count as f64
            }
        };
        let kld = mean(&|p| p.kld);
        let sim = mean(&|p| p.sim);
        let aucs: Vec<f64> = pairs.iter().filter_map(|p| p.auc).collect();
        let auc = if aucs.is_empty() { f64::NAN } else { aucs.iter().sum::<f64>() / aucs.len() as f64 };
        MetricsReport { count, auc_count: aucs.len(), pairs, kld, sim, auc, missing }
    }
}

/// Evaluates unit-sum predictions keyed by `(image, action)` against the
/// union ground truth of every annotated pair.
pub fn evaluate(
    predictions: &BTreeMap<(String, String), Heatmap>,
    annotations: &[KeypointAnnotation],
    cfg: &MetricsConfig,
    allow_missing: bool,
) -> Result<MetricsReport> {
    let mut grouped: BTreeMap<(String, String), Vec<&KeypointAnnotation>> = BTreeMap::new();
    for a in annotations {
        grouped.entry((a.image.clone(), a.action.clone())).or_default().push(a);
    }
    let missing: Vec<(String, String)> = grouped.keys().filter(|k| !predictions.contains_key(*k)).cloned().collect();
    if !missing.is_empty() && !allow_missing {
        return Err(Error::MissingPredictions(missing));
    }
    let present: Vec<(&(String, String), &Vec<&KeypointAnnotation>)> =
        grouped.iter().filter(|(k, _)| predictions.contains_key(*k)).collect();
    let pairs = present
        .par_iter()
        .map(|(key, anns)| {
            let pred = &predictions[*key];
            let (w, h) = (pred.width(), pred.height());
            let sigma = cfg.gt_sigma_frac * w.min(h) as f64;
            let maps = anns.iter().map(|a| keypoints_to_heatmap(&a.points, sigma, w, h)).collect::<Result<Vec<_>>>()?;
            let gt = union_gt(&maps)?;
            let auc = match auc_judd(pred, &gt, cfg) {
                Ok(v) => Some(v),
                Err(Error::DegenerateGroundTruth(why)) => {
                    log::warn!("{}/{}: AUC skipped, {why}", key.0, key.1);
                    None
                }
                Err(e) => return Err(e),
            };
            Ok(PairMetrics {
                image: key.0.clone(),
                action: key.1.clone(),
                kld: kld(pred, &gt, cfg)?,
                sim: sim(pred, &gt)?,
                auc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_pairs(pairs, missing))
}

/// Images named by a set of annotations.
pub fn annotated_images(annotations: &[KeypointAnnotation]) -> BTreeSet<String> {
    annotations.iter().map(|a| a.image.clone()).collect()
}

#[cfg(test)]
mod tests;
