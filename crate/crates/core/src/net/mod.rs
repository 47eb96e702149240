//! The hotspot network: a per-frame convolutional encoder, spatial pooling,
//! an LSTM aggregator with a linear action classifier, and the anticipation
//! module that maps inactive-object features to their active counterparts.
//! Also home to the supervised image-to-heatmap baseline.

mod img2heatmap;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv_output_extent, lstm_step, BatchNorm2d, BatchStats, BnMode, Conv2dSpec, L2PoolMode, LstmVars, Real, Tape,
    Tensor, Var,
};

pub use img2heatmap::{Img2Heatmap, Img2HeatmapConfig};
pub(crate) use params::{he_normal, uniform};
pub use params::{ParamSet, Trainable};

/// One conv + ReLU stage of the frame encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl StageConfig {
    pub fn spec(&self) -> Conv2dSpec {
        Conv2dSpec { stride: self.stride, padding: self.padding, dilation: self.dilation }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub stages: Vec<StageConfig>,
    /// Channels of the final stage (`d`).
    pub feature_channels: usize,
    /// Spatial extent of the final feature map (`n`).
    pub feature_resolution: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::dilated(32)
    }
}

impl EncoderConfig {
    /// Four 3×3 stages mapping 64×64 to `d`×16×16: two stride-2 stages,
    /// then two unit-stride stages, the last dilated by 2.
    pub fn dilated(d: usize) -> Self {
        let s = |out_channels, kernel, stride, dilation, padding| StageConfig {
            out_channels,
            kernel,
            stride,
            dilation,
            padding,
        };
        EncoderConfig {
            stages: vec![s(8, 3, 2, 1, 1), s(16, 3, 2, 1, 1), s(16, 3, 1, 1, 1), s(d, 3, 1, 2, 2)],
            feature_channels: d,
            feature_resolution: 16,
        }
    }

    /// Same channels without dilation, striding 2 in the last two stages:
    /// 64×64 to `d`×4×4.
    pub fn strided(d: usize) -> Self {
        let mut cfg = Self::dilated(d);
        for st in &mut cfg.stages[2..] {
            st.stride = 2;
            st.dilation = 1;
            st.padding = 1;
        }
        cfg.feature_resolution = 4;
        cfg
    }

    /// Spatial extent produced for a square `input` image.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        self.stages.iter().try_fold(input, |h, st| conv_output_extent(h, st.kernel, st.spec()))
    }

    /// Whether the last two stages keep resolution (unit stride).
    pub fn preserves_resolution(&self) -> bool {
        self.stages.len() >= 2 && self.stages[self.stages.len() - 2..].iter().all(|s| s.stride == 1)
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let Some(last) = self.stages.last() else {
            return Err(Error::Config("encoder needs at least one stage".into()));
        };
        if last.out_channels != self.feature_channels {
            return Err(Error::Config(format!(
                "last stage has {} channels but feature_channels is {}",
                last.out_channels, self.feature_channels
            )));
        }
        match self.output_extent(image_size) {
            Some(n) if n == self.feature_resolution => Ok(()),
            got => Err(Error::Config(format!(
                "encoder maps {image_size}x{image_size} to {got:?}, expected feature_resolution {}",
                self.feature_resolution
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    L2,
    Avg,
}

/// Initialization of the anticipation module's convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntInit {
    /// He-normal weights.
    He,
    /// A centered identity tap plus He-normal weights scaled by 0.1.
    #[default]
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub pool: PoolKind,
    pub l2_pool_mode: L2PoolMode,
    pub l2_pool_eps: f64,
    /// Route inactive images through the anticipation module when scoring
    /// them (auxiliary loss and hotspot maps).
    pub anticipation: bool,
    pub anticipation_init: AntInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            encoder: EncoderConfig::dilated(32),
            pool: PoolKind::L2,
            l2_pool_mode: L2PoolMode::Norm,
            l2_pool_eps: 1e-12,
            anticipation: true,
            anticipation_init: AntInit::default(),
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.encoder.feature_channels
    }

    pub fn n(&self) -> usize {
        self.encoder.feature_resolution
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.image_size)?;
        if self.l2_pool_eps < 0.0 {
            return Err(Error::Config("l2_pool_eps must be nonnegative".into()));
        }
        Ok(())
    }
}

pub(crate) const ANT_BLOCKS: usize = 2;
const IMAGE_CHANNELS: usize = 3;

/// Encoder, LSTM aggregator, action classifier and anticipation module.
#[derive(Clone, Debug, PartialEq)]
pub struct HotspotModel<T> {
    pub config: ModelConfig,
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    params: ParamSet<T>,
    /// Running moments of the anticipation module's batch norms.
    pub bn: Vec<BatchNorm2d<T>>,
}

/// A model's parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<Var>,
    stages: usize,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn encoder_stage(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    pub fn lstm(&self) -> LstmVars {
        let b = 2 * self.stages;
        LstmVars { w_ih: self.vars[b], w_hh: self.vars[b + 1], bias: self.vars[b + 2] }
    }

    pub fn classifier(&self) -> (Var, Var) {
        let b = 2 * self.stages + 3;
        (self.vars[b], self.vars[b + 1])
    }

    /// `(conv weight, conv bias, bn scale, bn shift)` of anticipation block `j`.
    pub fn anticipation_block(&self, j: usize) -> [Var; 4] {
        let b = 2 * self.stages + 5 + 4 * j;
        [self.vars[b], self.vars[b + 1], self.vars[b + 2], self.vars[b + 3]]
    }
}

/// Per-step results of running the video model over a clip.
#[derive(Clone, Debug)]
pub struct StepOutputs {
    /// Encoder features of every frame, `T×d×n×n`.
    pub features: Var,
    /// Pooled features `g_t`, `T×d`.
    pub pooled: Var,
    pub hidden: Vec<Var>,
    pub logits: Vec<Var>,
    /// Final hidden state.
    pub h_star: Var,
}

/// Scores of an inactive image and the intermediate embeddings.
#[derive(Clone, Debug)]
pub struct InactiveOutputs<T> {
    /// Action scores before softmax.
    pub logits: Var,
    /// Anticipated embedding (equals the input when anticipation is off).
    pub anticipated: Var,
    pub pooled: Var,
    pub bn_stats: Vec<BatchStats<T>>,
}

impl<T: Real> Trainable<T> for HotspotModel<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
}

impl<T: Real> HotspotModel<T> {
    pub fn new<R: Rng>(config: ModelConfig, actions: Vec<String>, objects: Vec<String>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if actions.is_empty() {
            return Err(Error::Config("action vocabulary is empty".into()));
        }
        let mut params = ParamSet::default();
        let mut c_in = IMAGE_CHANNELS;
        for (i, st) in config.encoder.stages.iter().enumerate() {
            let fan_in = c_in * st.kernel * st.kernel;
            params.push(
                format!("encoder.{i}.weight"),
                he_normal(&[st.out_channels, c_in, st.kernel, st.kernel], fan_in, rng),
            );
            params.push(format!("encoder.{i}.bias"), Tensor::zeros([st.out_channels]));
            c_in = st.out_channels;
        }
        let d = config.d();
        let k = actions.len();
        let bound = 1.0 / (d as f64).sqrt();
        params.push("lstm.w_ih", uniform(&[4 * d, d], bound, rng));
        params.push("lstm.w_hh", uniform(&[4 * d, d], bound, rng));
        params.push("lstm.bias", Tensor::zeros([4 * d]));
        params.push("classifier.weight", uniform(&[k, d], bound, rng));
        params.push("classifier.bias", Tensor::zeros([k]));
        for j in 0..ANT_BLOCKS {
            let mut w = he_normal::<T, _>(&[d, d, 3, 3], 9 * d, rng);
            if config.anticipation_init == AntInit::Identity {
                let data = w.data_mut();
                data.iter_mut().for_each(|v| *v *= T::from_f64_lossy(0.1));
                for c in 0..d {
                    data[(c * d + c) * 9 + 4] += T::one();
                }
            }
            params.push(format!("anticipation.{j}.conv.weight"), w);
            params.push(format!("anticipation.{j}.conv.bias"), Tensor::zeros([d]));
            params.push(format!("anticipation.{j}.bn.weight"), Tensor::ones([d]));
            params.push(format!("anticipation.{j}.bn.bias"), Tensor::zeros([d]));
        }
        Ok(HotspotModel {
            config,
            actions,
            objects,
            params,
            bn: (0..ANT_BLOCKS).map(|_| BatchNorm2d::new(d)).collect(),
        })
    }

    /// Reassembles a model from stored parameters, checking every shape
    /// against a freshly initialized template.
    pub fn from_parts(
        config: ModelConfig,
        actions: Vec<String>,
        objects: Vec<String>,
        params: ParamSet<T>,
        bn: Vec<BatchNorm2d<T>>,
    ) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let template = Self::new(config, actions, objects, &mut rng)?;
        if template.params.names() != params.names() {
            return Err(Error::Config("parameter names do not match the architecture".into()));
        }
        for ((name, a), b) in template.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "from_parts",
                    format!("{name}: expected {:?}, got {:?}", a.shape(), b.shape()),
                ));
            }
        }
        if bn.len() != ANT_BLOCKS || bn.iter().any(|b| b.channels() != template.config.d()) {
            return Err(Error::Config("batch-norm state does not match the architecture".into()));
        }
        Ok(HotspotModel { params, bn, ..template })
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundModel {
        BoundModel { vars: self.params.bind(tape, requires_grad), stages: self.config.encoder.stages.len() }
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        let ok = match shape {
            [c, h, w] | [_, c, h, w] => *c == IMAGE_CHANNELS && *h == s && *w == s,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape("encode_frame", format!("expected 3x{s}x{s} images, got {shape:?}")))
        }
    }

    /// Encoder features for `3×H×W` (or `N×3×H×W`) images.
    pub fn encode(&self, tape: &mut Tape<T>, b: &BoundModel, images: Var) -> Result<Var> {
        self.check_image(tape.value(images).shape())?;
        let mut x = images;
        for (i, st) in self.config.encoder.stages.iter().enumerate() {
            let (w, bias) = b.encoder_stage(i);
            let y = tape.conv2d(x, w, Some(bias), st.spec())?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// Spatial pooling `P`.
    pub fn pool(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self.config.pool {
            PoolKind::L2 => tape.l2_pool_spatial(x, self.config.l2_pool_mode, self.config.l2_pool_eps),
            PoolKind::Avg => tape.avg_pool_spatial(x),
        }
    }

    pub fn zero_state(&self, tape: &mut Tape<T>) -> (Var, Var) {
        let d = self.config.d();
        (tape.constant(Tensor::zeros([d])), tape.constant(Tensor::zeros([d])))
    }

    /// Runs the video model on a `T×3×H×W` clip.
    pub fn forward_video(&self, tape: &mut Tape<T>, b: &BoundModel, clip: Var) -> Result<StepOutputs> {
        let shape = tape.value(clip).shape().to_vec();
        if shape.len() != 4 || shape[0] == 0 {
            return Err(Error::shape("forward_video", format!("expected a nonempty T×3×H×W clip, got {shape:?}")));
        }
        let features = self.encode(tape, b, clip)?;
        let pooled = self.pool(tape, features)?;
        let lstm = b.lstm();
        let (cw, cb) = b.classifier();
        let mut state = self.zero_state(tape);
        let mut hidden = Vec::with_capacity(shape[0]);
        let mut logits = Vec::with_capacity(shape[0]);
        for t in 0..shape[0] {
            let g = tape.select(pooled, t)?;
            state = lstm_step(tape, g, state, &lstm)?;
            hidden.push(state.0);
            logits.push(tape.linear(state.0, cw, Some(cb))?);
        }
        Ok(StepOutputs { features, pooled, h_star: state.0, hidden, logits })
    }

    fn check_embedding(&self, shape: &[usize], batched: bool) -> Result<()> {
        let (d, n) = (self.config.d(), self.config.n());
        let tail = if batched && shape.len() == 4 { &shape[1..] } else { shape };
        if tail != [d, n, n] {
            return Err(Error::shape("anticipate", format!("expected {d}x{n}x{n} embedding, got {shape:?}")));
        }
        Ok(())
    }

    /// Anticipation module: two channel-preserving conv-bn-relu blocks.
    /// Accepts a single `d×n×n` embedding or an `N×d×n×n` batch; train-mode
    /// batch norm normalizes over the whole batch.
    pub fn anticipate(
        &self,
        tape: &mut Tape<T>,
        b: &BoundModel,
        x_inactive: Var,
        mode: BnMode,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        self.check_embedding(tape.value(x_inactive).shape(), true)?;
        let spec = Conv2dSpec { stride: 1, padding: 1, dilation: 1 };
        let mut x = x_inactive;
        let mut stats = Vec::new();
        for (j, bn) in self.bn.iter().enumerate() {
            let [w, bias, gamma, beta] = b.anticipation_block(j);
            let y = tape.conv2d(x, w, Some(bias), spec)?;
            let (y, s) = bn.forward(tape, y, gamma, beta, mode)?;
            stats.extend(s);
            x = tape.relu(y);
        }
        Ok((x, stats))
    }

    /// Action scores of an inactive embedding from one LSTM step on the
    /// (anticipated) pooled features, starting from the zero state.
    pub fn forward_inactive(
        &self,
        tape: &mut Tape<T>,
        b: &BoundModel,
        x_inactive: Var,
        mode: BnMode,
    ) -> Result<InactiveOutputs<T>> {
        self.check_embedding(tape.value(x_inactive).shape(), false)?;
        let (anticipated, bn_stats) = if self.config.anticipation {
            self.anticipate(tape, b, x_inactive, mode)?
        } else {
            (x_inactive, Vec::new())
        };
        let pooled = self.pool(tape, anticipated)?;
        let logits = self.score_pooled(tape, b, pooled)?;
        Ok(InactiveOutputs { logits, anticipated, pooled, bn_stats })
    }

    /// Classifier output after a single LSTM step from the zero state.
    pub fn score_pooled(&self, tape: &mut Tape<T>, b: &BoundModel, pooled: Var) -> Result<Var> {
        let state = self.zero_state(tape);
        let (h1, _) = lstm_step(tape, pooled, state, &b.lstm())?;
        let (cw, cb) = b.classifier();
        tape.linear(h1, cw, Some(cb))
    }

    /// Encoder features of a single image, outside of any training graph.
    pub fn encode_frame(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.rank() != 3 {
            return Err(Error::shape("encode_frame", format!("expected 3×H×W, got {:?}", image.shape())));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let f = self.encode(&mut tape, &b, x)?;
        Ok(tape.value(f).clone())
    }

    /// Per-step logits `T×K` for a clip.
    pub fn clip_logits(&self, clip: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(clip.clone());
        let out = self.forward_video(&mut tape, &b, x)?;
        Ok(out.logits.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Predicted action of a clip from its final logits.
    pub fn classify_clip(&self, clip: &Tensor<T>) -> Result<usize> {
        let logits = self.clip_logits(clip)?;
        Ok(argmax(logits.last().expect("nonempty clip").data()))
    }

    /// Pooled (anticipated) embedding of an inactive image; used to compare
    /// objects in the interaction feature space.
    pub fn inactive_embedding(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let feat = self.encode(&mut tape, &b, x)?;
        let out = self.forward_inactive(&mut tape, &b, feat, BnMode::Eval)?;
        Ok(tape.value(out.pooled).clone())
    }

    pub fn fold_bn_stats(&mut self, stats: &[BatchStats<T>]) {
        for (bn, s) in self.bn.iter_mut().zip(stats) {
            bn.update(s);
        }
    }
}

pub(crate) fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
