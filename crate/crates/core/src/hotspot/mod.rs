//! Gradient-weighted activation maps through the anticipation module,
//! heatmap post-processing, the Grad-CAM and center-bias baselines, and
//! clustering of object embeddings.

mod cluster;
mod heatmap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{HotspotModel, Trainable};
use crate::tensor::{bilinear_resize, BnMode, Real, Tape, Tensor, Var};

pub use cluster::{average_linkage, cluster_objects, Dendrogram, Merge};
pub(crate) use heatmap::gaussian_grid;
pub use heatmap::{center_bias_map, Heatmap, Normalization, UNIT_SUM_TOL};

/// Which embedding the class score is differentiated against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientTarget {
    /// The inactive embedding `x_I`, backpropagating through the
    /// anticipation module.
    #[default]
    Inactive,
    /// The anticipated embedding `F_ant(x_I)`.
    Anticipated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HotspotConfig {
    pub gradient_target: GradientTarget,
    /// Gaussian blur applied after upsampling, in pixels; 0 disables it.
    pub blur_sigma: f64,
    /// Center-bias baseline σ as a fraction of `min(H, W)`.
    pub center_sigma_frac: f64,
}

impl Default for HotspotConfig {
    fn default() -> Self {
        HotspotConfig { gradient_target: GradientTarget::Inactive, blur_sigma: 0.0, center_sigma_frac: 0.25 }
    }
}

/// One unit-sum map per action for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct HotspotStack {
    pub image: String,
    pub maps: Vec<Heatmap>,
}

fn check_features<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.rank() != 3 {
        return Err(Error::shape("activation map", format!("expected C×h×w features, got {:?}", x.shape())));
    }
    Ok(())
}

fn score_gradient<T: Real, F>(x: &Tensor<T>, score: F) -> Result<Tensor<T>>
where
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    check_features(x)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = score(&mut tape, xv)?;
    tape.backward(y)?;
    Ok(tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

/// `Σ_k ReLU(∂y/∂x_k ⊙ x_k)` for the scalar score `y` of features `x`.
pub fn activation_map<T: Real, F>(x: &Tensor<T>, score: F) -> Result<Tensor<f64>>
where
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    let g = score_gradient(x, score)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for k in 0..c {
        let xs = &x.data()[k * hw..(k + 1) * hw];
        let gs = &g.data()[k * hw..(k + 1) * hw];
        for ((o, &xv), &gv) in out.iter_mut().zip(xs).zip(gs) {
            *o += (gv.to_f64_lossy() * xv.to_f64_lossy()).max(0.0);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Classic Grad-CAM: `ReLU(Σ_k α_k x_k)` with `α_k` the spatial mean of
/// `∂y/∂x_k`.
pub fn gradcam_map<T: Real, F>(x: &Tensor<T>, score: F) -> Result<Tensor<f64>>
where
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    let g = score_gradient(x, score)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let mut out = vec![0.0; hw];
    for k in 0..c {
        let xs = &x.data()[k * hw..(k + 1) * hw];
        let alpha = g.data()[k * hw..(k + 1) * hw].iter().map(|v| v.to_f64_lossy()).sum::<f64>() / hw as f64;
        for (o, &xv) in out.iter_mut().zip(xs) {
            *o += alpha * xv.to_f64_lossy();
        }
    }
    Tensor::new(vec![h, w], out.into_iter().map(|v| v.max(0.0)).collect())
}

fn check_model<T: Real>(model: &HotspotModel<T>, action: usize) -> Result<()> {
    if action >= model.num_actions() {
        return Err(Error::LabelOutOfRange { label: action, classes: model.num_actions() });
    }
    if !model.params().all_finite() {
        return Err(Error::NonFinite("model parameters".into()));
    }
    Ok(())
}

/// Raw `n×n` hotspot map of `action` for inactive features `x_i`.
pub fn hotspot_map<T: Real>(
    model: &HotspotModel<T>,
    x_i: &Tensor<T>,
    action: usize,
    target: GradientTarget,
) -> Result<Tensor<f64>> {
    check_model(model, action)?;
    match target {
        GradientTarget::Inactive => activation_map(x_i, |tape, x| {
            let b = model.bind(tape, false);
            let out = model.forward_inactive(tape, &b, x, BnMode::Eval)?;
            tape.select(out.logits, action)
        }),
        GradientTarget::Anticipated => {
            let anticipated = if model.config.anticipation {
                let mut tape = Tape::new();
                let b = model.bind(&mut tape, false);
                let x = tape.constant(x_i.clone());
                let (y, _) = model.anticipate(&mut tape, &b, x, BnMode::Eval)?;
                tape.value(y).clone()
            } else {
                x_i.clone()
            };
            activation_map(&anticipated, |tape, x| {
                let b = model.bind(tape, false);
                let p = model.pool(tape, x)?;
                let logits = model.score_pooled(tape, &b, p)?;
                tape.select(logits, action)
            })
        }
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(map: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape("gaussian_blur", format!("{:?}", map.shape())));
    };
    if sigma <= 0.0 {
        return Ok(map.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, &k) in kernel.iter().enumerate() {
                    let off = j as isize - radius;
                    let (sx, sy) = if along_x {
                        ((x as isize + off).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + off).clamp(0, h as isize - 1) as usize)
                    };
                    acc += k * src[sy * w + sx];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(map.data(), true);
    Tensor::new(vec![h, w], pass(&tmp, false))
}

/// Upsamples a raw feature-resolution map to the image and normalizes it
/// to unit sum.
pub fn finish_map(raw: &Tensor<f64>, width: usize, height: usize, blur_sigma: f64) -> Result<Heatmap> {
    let up = bilinear_resize(raw, height, width)?;
    let up = gaussian_blur(&up, blur_sigma)?;
    let clamped = up.map(|v| v.max(0.0));
    Ok(Heatmap::from_tensor(&clamped)?.to_unit_sum())
}

fn image_extent<T: Real>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match image.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(Error::shape("predict_hotspots", format!("expected 3×H×W, got {s:?}"))),
    }
}

/// Hotspot maps for every action of an inactive image.
pub fn predict_hotspots<T: Real>(
    model: &HotspotModel<T>,
    image_id: &str,
    image: &Tensor<T>,
    cfg: &HotspotConfig,
) -> Result<HotspotStack> {
    let (h, w) = image_extent(image)?;
    let x_i = model.encode_frame(image)?;
    let maps = (0..model.num_actions())
        .map(|a| {
            let raw = hotspot_map(model, &x_i, a, cfg.gradient_target)?;
            finish_map(&raw, w, h, cfg.blur_sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HotspotStack { image: image_id.to_string(), maps })
}

/// Grad-CAM maps of a video-only model, scored with a single LSTM step on
/// the inactive image's features.
pub fn gradcam_baseline<T: Real>(
    model: &HotspotModel<T>,
    image_id: &str,
    image: &Tensor<T>,
    cfg: &HotspotConfig,
) -> Result<HotspotStack> {
    let (h, w) = image_extent(image)?;
    let x = model.encode_frame(image)?;
    let maps = (0..model.num_actions())
        .map(|a| {
            check_model(model, a)?;
            let raw = gradcam_map(&x, |tape, xv| {
                let b = model.bind(tape, false);
                let p = model.pool(tape, xv)?;
                let logits = model.score_pooled(tape, &b, p)?;
                tape.select(logits, a)
            })?;
            finish_map(&raw, w, h, cfg.blur_sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HotspotStack { image: image_id.to_string(), maps })
}

/// The same centered Gaussian for every action.
pub fn center_bias_stack(
    image_id: &str,
    width: usize,
    height: usize,
    actions: usize,
    cfg: &HotspotConfig,
) -> Result<HotspotStack> {
    let m = center_bias_map(width, height, cfg.center_sigma_frac)?;
    Ok(HotspotStack { image: image_id.to_string(), maps: vec![m; actions] })
}
