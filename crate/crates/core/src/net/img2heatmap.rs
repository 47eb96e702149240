use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{he_normal, ParamSet, Trainable};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Img2HeatmapConfig {
    pub image_size: usize,
    /// Output channels of the downsampling stages; the decoder mirrors them.
    pub channels: Vec<usize>,
}

impl Default for Img2HeatmapConfig {
    fn default() -> Self {
        Img2HeatmapConfig { image_size: 64, channels: vec![8, 16, 16] }
    }
}

/// Fully convolutional encoder-decoder predicting one heatmap per action.
/// Each encoder stage is a stride-2 3×3 conv with ReLU; each decoder stage
/// doubles the resolution bilinearly and applies a 3×3 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Img2Heatmap<T> {
    pub config: Img2HeatmapConfig,
    pub actions: Vec<String>,
    params: ParamSet<T>,
}

const DOWN: Conv2dSpec = Conv2dSpec { stride: 2, padding: 1, dilation: 1 };
const SAME: Conv2dSpec = Conv2dSpec { stride: 1, padding: 1, dilation: 1 };

impl<T: Real> Trainable<T> for Img2Heatmap<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Real> Img2Heatmap<T> {
    pub fn new<R: Rng>(config: Img2HeatmapConfig, actions: Vec<String>, rng: &mut R) -> Result<Self> {
        let depth = config.channels.len();
        if depth == 0 || !config.image_size.is_multiple_of(1 << depth) {
            return Err(Error::Config(format!("image size {} must be divisible by 2^{depth}", config.image_size)));
        }
        if actions.is_empty() {
            return Err(Error::Config("action vocabulary is empty".into()));
        }
        let mut params = ParamSet::default();
        let mut conv = |name: String, c_out: usize, c_in: usize, params: &mut ParamSet<T>| {
            params.push(format!("{name}.weight"), he_normal(&[c_out, c_in, 3, 3], 9 * c_in, rng));
            params.push(format!("{name}.bias"), Tensor::zeros([c_out]));
        };
        let mut c_in = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            conv(format!("down.{i}"), c, c_in, &mut params);
            c_in = c;
        }
        for i in 0..depth {
            let c_out = if i + 1 == depth { actions.len() } else { config.channels[depth - 2 - i] };
            conv(format!("up.{i}"), c_out, c_in, &mut params);
            c_in = c_out;
        }
        Ok(Img2Heatmap { config, actions, params })
    }

    /// Pre-sigmoid maps for `3×H×W` or `N×3×H×W` input.
    pub fn forward_logits(&self, tape: &mut Tape<T>, vars: &[Var], image: Var) -> Result<Var> {
        let shape = tape.value(image).shape().to_vec();
        let s = self.config.image_size;
        let ok = matches!(shape[..], [3, h, w] | [_, 3, h, w] if h == s && w == s);
        if !ok {
            return Err(Error::shape("img2heatmap", format!("expected 3x{s}x{s} images, got {shape:?}")));
        }
        let depth = self.config.channels.len();
        let mut x = image;
        for i in 0..depth {
            let y = tape.conv2d(x, vars[2 * i], Some(vars[2 * i + 1]), DOWN)?;
            x = tape.relu(y);
        }
        let mut extent = s >> depth;
        for i in 0..depth {
            extent *= 2;
            let up = tape.bilinear_upsample(x, extent, extent)?;
            let j = 2 * (depth + i);
            x = tape.conv2d(up, vars[j], Some(vars[j + 1]), SAME)?;
            if i + 1 < depth {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Sigmoid heatmaps, `K×H×W`.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let z = self.forward_logits(&mut tape, &vars, x)?;
        let y = tape.sigmoid(z);
        Ok(tape.value(y).clone())
    }

    /// Per-pixel mean binary cross-entropy against `target` in [0, 1].
    pub fn loss(&self, tape: &mut Tape<T>, vars: &[Var], image: Var, target: &Tensor<T>) -> Result<Var> {
        let z = self.forward_logits(tape, vars, image)?;
        tape.bce_with_logits(z, target)
    }
}
