use serde::{Deserialize, Serialize};

use super::conv::{conv_backward, conv_forward, conv_output_extent, Conv2dSpec, ConvGeom};
use super::upsample::Resize;
use super::{gemm, lit, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How per-channel spatial L2 pooling is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2PoolMode {
    /// `sqrt(sum x^2 + eps)`
    #[default]
    Norm,
    /// `sqrt(mean x^2 + eps)`
    RootMean,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    L2Pool {
        x: Var,
        hw: usize,
        mode: L2PoolMode,
    },
    AvgPool {
        x: Var,
        hw: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        hw: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        /// Batch statistics were used (train mode), so the normalization
        /// itself depends on `x`.
        batch_stats: bool,
    },
    Upsample {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    BceLogits {
        z: Var,
        target: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Norm(Var),
    Normalize {
        a: Var,
        norm: T,
    },
    Select {
        a: Var,
        index: usize,
    },
    Narrow {
        a: Var,
        start: usize,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// Every op appends a node; [`Tape::backward`] walks nodes in reverse
/// creation order and accumulates gradients into every node that leads to a
/// leaf created with `requires_grad`. Gradients from repeated backward calls
/// add up until [`Tape::zero_grads`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    pattern: Option<Vec<bool>>,
    visits: Vec<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Splits a rank-3 `C×H×W` or rank-4 `N×C×H×W` shape into `(n, c, h, w)`.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected C×H×W or N×C×H×W, got {shape:?}"))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), pattern: None, visits: Vec::new() }
    }

    /// Enables recording of the on/off state of every piecewise-linear unit,
    /// used by [`super::grad_check`] to skip positions that straddle a kink.
    pub fn track_activation_pattern(&mut self) {
        self.pattern = Some(Vec::new());
    }

    pub fn activation_pattern(&self) -> Option<&[bool]> {
        self.pattern.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(value, op, needs_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as an input; gradients are kept when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of the last backward pass(es) with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Node indices processed by the most recent backward pass, in order.
    pub fn last_backward_visits(&self) -> &[usize] {
        &self.visits
    }

    // ----- ops ---------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (batch, c_in, h, wd) = image_dims("conv2d", &xs)?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, wc_in, k, k2] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if k != k2 {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {k}x{k2}")));
        }
        if wc_in != c_in {
            return Err(Error::shape("conv2d", format!("input has {c_in} channels but weight expects {wc_in}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {c_out} output channels", self.value(b).shape()),
                ));
            }
        }
        let (Some(oh), Some(ow)) = (conv_output_extent(h, k, spec), conv_output_extent(wd, k, spec)) else {
            return Err(Error::shape("conv2d", format!("no window fits: input {h}x{wd}, kernel {k}, {spec:?}")));
        };
        let geom = ConvGeom { batch, c_in, h, w: wd, c_out, k, oh, ow, spec };
        let out = conv_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let shape = if xs.len() == 3 { vec![c_out, oh, ow] } else { vec![batch, c_out, oh, ow] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// `x·Wᵀ + b` for `x` of shape `[d]` or `[rows, d]` and `W` of shape `[m, d]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [d_out, d_in] = ws[..] else {
            return Err(Error::shape("linear", format!("weight must be rank 2, got {ws:?}")));
        };
        let rows = match xs[..] {
            [d] if d == d_in => 1,
            [r, d] if d == d_in => r,
            _ => return Err(Error::shape("linear", format!("input {xs:?} incompatible with weight {ws:?}"))),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [d_out] {
                return Err(Error::shape("linear", format!("bias {:?} for {d_out} outputs", self.value(b).shape())));
            }
        }
        let mut out = vec![T::zero(); rows * d_out];
        gemm(false, true, rows, d_out, d_in, self.value(x).data(), self.value(w).data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let shape = if xs.len() == 1 { vec![d_out] } else { vec![rows, d_out] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b, rows, d_in, d_out }, &inputs))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = lit::<T>(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = lit::<T>(c);
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if let Some(p) = self.pattern.as_mut() {
            p.extend(self.nodes[a.0].value.data().iter().map(|&x| x > T::zero()));
        }
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    /// Per-channel spatial L2 norm: `C×H×W → C` or `N×C×H×W → N×C`.
    pub fn l2_pool_spatial(&mut self, x: Var, mode: L2PoolMode, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = image_dims("l2_pool_spatial", &xs)?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("l2_pool_spatial", "empty spatial extent"));
        }
        let scale = match mode {
            L2PoolMode::Norm => T::one(),
            L2PoolMode::RootMean => T::one() / lit(hw as f64),
        };
        let eps = lit::<T>(eps);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| (plane.iter().map(|&v| v * v).sum::<T>() * scale + eps).sqrt())
            .collect();
        let shape = if xs.len() == 3 { vec![c] } else { vec![n, c] };
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Pool { x, hw, mode }, &[x]))
    }

    /// Per-channel spatial mean: `C×H×W → C` or `N×C×H×W → N×C`.
    pub fn avg_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = image_dims("avg_pool_spatial", &xs)?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("avg_pool_spatial", "empty spatial extent"));
        }
        let inv = T::one() / lit(hw as f64);
        let out: Vec<T> = self.value(x).data().chunks(hw).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
        let shape = if xs.len() == 3 { vec![c] } else { vec![n, c] };
        Ok(self.push(Tensor::new(shape, out)?, Op::AvgPool { x, hw }, &[x]))
    }

    /// Batch normalization over `N·H·W` per channel using the batch's own
    /// statistics. Returns the output and the (mean, biased variance) used.
    pub fn batchnorm2d_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.value(x).shape().to_vec();
        let (n, c, h, w) = image_dims("batchnorm2d", &xs)?;
        self.check_affine(gamma, beta, c)?;
        let hw = h * w;
        let count = lit::<T>((n * hw) as f64);
        let data = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (i, plane) in data.chunks(hw).enumerate() {
            mean[i % c] += plane.iter().copied().sum::<T>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, plane) in data.chunks(hw).enumerate() {
            let m = mean[i % c];
            var[i % c] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        var.iter_mut().for_each(|v| *v /= count);
        let out = self.batchnorm_apply(x, gamma, beta, c, hw, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed moments (inference).
    pub fn batchnorm2d_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (_, c, h, w) = image_dims("batchnorm2d", &xs)?;
        self.check_affine(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batchnorm2d", "running moments length"));
        }
        self.batchnorm_apply(x, gamma, beta, c, h * w, mean, var, eps, false)
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "affine params {:?}/{:?} for {c} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn batchnorm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        hw: usize,
        mean: &[T],
        var: &[T],
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let eps = lit::<T>(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for (i, (plane, (xh, o))) in src.chunks(hw).zip(xhat.chunks_mut(hw).zip(out.chunks_mut(hw))).enumerate() {
            let ch = i % channels;
            for ((&v, xh), o) in plane.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - mean[ch]) * inv_std[ch];
                *o = g[ch] * *xh + b[ch];
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gamma, beta, channels, hw, xhat, inv_std, batch_stats },
            &[x, gamma, beta],
        ))
    }

    /// Bilinear resize (align-corners-false) of the trailing two axes.
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("bilinear_upsample", format!("rank {} input", xs.len())));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if out_h < h || out_w < w || h == 0 || w == 0 {
            return Err(Error::shape("bilinear_upsample", format!("cannot upsample {h}x{w} to {out_h}x{out_w}")));
        }
        let planes = self.value(x).numel() / (h * w);
        let rs = Resize { planes, h, w, oh: out_h, ow: out_w };
        let out = rs.forward(self.value(x).data());
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample { x, planes, h, w, oh: out_h, ow: out_w }, &[x]))
    }

    /// `-log softmax(logits)[label]` for a `K` vector of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        let [k] = ls[..] else {
            return Err(Error::shape("softmax_cross_entropy", format!("logits {ls:?}")));
        };
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits).data();
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let probs: Vec<T> = exps.iter().map(|&e| e / total).collect();
        let loss = total.ln() + max - z[label];
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, label, probs }, &[logits]))
    }

    /// Mean binary cross-entropy between `sigmoid(z)` and `target` in [0, 1].
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape("bce_with_logits", self.value(z), target)?;
        let n = lit::<T>(target.numel() as f64);
        let loss = self
            .value(z)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&zi, &ti)| zi.max(T::zero()) - zi * ti + (-zi.abs()).exp().ln_1p())
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { z, target: target.data().to_vec() }, &[z]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = lit::<T>(self.value(a).numel() as f64);
        let s = self.value(a).sum() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Euclidean norm of all elements; the subgradient at zero is zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = self.value(a).data().iter().map(|&v| v * v).sum::<T>().sqrt();
        if let Some(p) = self.pattern.as_mut() {
            p.push(n > T::zero());
        }
        self.push(Tensor::scalar(n), Op::Norm(a), &[a])
    }

    /// `a / ‖a‖`; the zero vector maps to itself.
    pub fn normalize(&mut self, a: Var) -> Var {
        let norm = self.value(a).data().iter().map(|&v| v * v).sum::<T>().sqrt();
        let v = if norm > T::zero() { self.value(a).map(|x| x / norm) } else { self.value(a).clone() };
        self.push(v, Op::Normalize { a, norm }, &[a])
    }

    /// Slice at `index` along the leading axis (drops that axis).
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a).index_axis0(index)?;
        Ok(self.push(v, Op::Select { a, index }, &[a]))
    }

    /// Range `[start, start + len)` along the leading axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let Some((&lead, rest)) = src.shape().split_first() else {
            return Err(Error::shape("narrow", "rank-0 tensor"));
        };
        if start + len > lead {
            return Err(Error::shape("narrow", format!("range {start}..{} exceeds extent {lead}", start + len)));
        }
        let stride: usize = rest.iter().product();
        let mut shape = vec![len];
        shape.extend_from_slice(rest);
        let data = src.data()[start * stride..(start + len) * stride].to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { a, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    // ----- backward ----------------------------------------------------

    /// Accumulates d`loss`/d`v` into every node on a path to a tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.visits.clear();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.visits.push(i);
            self.propagate(i, &g, &mut pending);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], pending: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        macro_rules! with_slot {
            ($v:expr, |$buf:ident| $body:expr) => {
                upd(nodes, pending, $v, |$buf: &mut [T]| $body)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let local = |v: Var| nodes[v.0].needs_grad.then(|| vec![T::zero(); nodes[v.0].value.numel()]);
                let mut dx = local(*x);
                let mut dw = local(*w);
                let mut db = b.and_then(local);
                conv_backward(geom, val(*x), val(*w), g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (v, d) in [(Some(*x), dx), (Some(*w), dw), (*b, db)] {
                    if let (Some(v), Some(d)) = (v, d) {
                        with_slot!(v, |buf| buf.iter_mut().zip(&d).for_each(|(a, &c)| *a += c));
                    }
                }
            }
            Op::Linear { x, w, b, rows, d_in, d_out } => {
                with_slot!(*x, |dx| gemm(false, false, *rows, *d_in, *d_out, g, val(*w), T::one(), dx));
                with_slot!(*w, |dw| gemm(true, false, *d_out, *d_in, *rows, g, val(*x), T::one(), dw));
                if let Some(b) = b {
                    with_slot!(*b, |db| {
                        for row in g.chunks(*d_out) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                with_slot!(*a, |da| da.iter_mut().zip(g).for_each(|(d, &v)| *d += v));
                with_slot!(*b, |db| db.iter_mut().zip(g).for_each(|(d, &v)| *d += v));
            }
            Op::Sub(a, b) => {
                with_slot!(*a, |da| da.iter_mut().zip(g).for_each(|(d, &v)| *d += v));
                with_slot!(*b, |db| db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with_slot!(*a, |da| {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                with_slot!(*b, |db| {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                with_slot!(*a, |da| da.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c));
            }
            Op::AddScalar(a) => {
                with_slot!(*a, |da| da.iter_mut().zip(g).for_each(|(d, &v)| *d += v));
            }
            Op::Relu(a) => {
                let av = val(*a);
                with_slot!(*a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        if x > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                with_slot!(*a, |da| {
                    for ((d, &gv), &s) in da.iter_mut().zip(g).zip(out) {
                        *d += gv * s * (T::one() - s);
                    }
                });
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                with_slot!(*a, |da| {
                    for ((d, &gv), &t) in da.iter_mut().zip(g).zip(out) {
                        *d += gv * (T::one() - t * t);
                    }
                });
            }
            Op::L2Pool { x, hw, mode } => {
                let scale = match mode {
                    L2PoolMode::Norm => T::one(),
                    L2PoolMode::RootMean => T::one() / lit(*hw as f64),
                };
                let out = node.value.data();
                let xv = val(*x);
                with_slot!(*x, |dx| {
                    for (p, (dplane, plane)) in dx.chunks_mut(*hw).zip(xv.chunks(*hw)).enumerate() {
                        let coef = g[p] * scale / out[p];
                        for (d, &v) in dplane.iter_mut().zip(plane) {
                            *d += coef * v;
                        }
                    }
                });
            }
            Op::AvgPool { x, hw } => {
                let inv = T::one() / lit(*hw as f64);
                with_slot!(*x, |dx| {
                    for (p, dplane) in dx.chunks_mut(*hw).enumerate() {
                        let v = g[p] * inv;
                        dplane.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, channels, hw, xhat, inv_std, batch_stats } => {
                let c = *channels;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (gp, xp)) in g.chunks(*hw).zip(xhat.chunks(*hw)).enumerate() {
                    let ch = i % c;
                    for (&gv, &xh) in gp.iter().zip(xp) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xh;
                    }
                }
                with_slot!(*gamma, |dg| dg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v));
                with_slot!(*beta, |db| db.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v));
                let gam = val(*gamma);
                let planes = g.len() / *hw;
                let count = lit::<T>((planes / c * *hw) as f64);
                with_slot!(*x, |dx| {
                    for (i, ((dp, gp), xp)) in dx.chunks_mut(*hw).zip(g.chunks(*hw)).zip(xhat.chunks(*hw)).enumerate() {
                        let ch = i % c;
                        let k = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let mg = sum_g[ch] / count;
                            let mgx = sum_gx[ch] / count;
                            for ((d, &gv), &xh) in dp.iter_mut().zip(gp).zip(xp) {
                                *d += k * (gv - mg - xh * mgx);
                            }
                        } else {
                            for (d, &gv) in dp.iter_mut().zip(gp) {
                                *d += k * gv;
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, planes, h, w, oh, ow } => {
                let rs = Resize { planes: *planes, h: *h, w: *w, oh: *oh, ow: *ow };
                with_slot!(*x, |dx| rs.backward(g, dx));
            }
            Op::SoftmaxCe { logits, label, probs } => {
                with_slot!(*logits, |dl| {
                    for (k, (d, &p)) in dl.iter_mut().zip(probs).enumerate() {
                        let y = if k == *label { T::one() } else { T::zero() };
                        *d += g[0] * (p - y);
                    }
                });
            }
            Op::BceLogits { z, target } => {
                let n = lit::<T>(target.len() as f64);
                let zv = val(*z);
                with_slot!(*z, |dz| {
                    for ((d, &zi), &ti) in dz.iter_mut().zip(zv).zip(target) {
                        *d += g[0] * (sigmoid(zi) - ti) / n;
                    }
                });
            }
            Op::Sum(a) => {
                with_slot!(*a, |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let v = g[0] / lit(nodes[a.0].value.numel() as f64);
                with_slot!(*a, |da| da.iter_mut().for_each(|d| *d += v));
            }
            Op::Norm(a) => {
                let n = node.value.data()[0];
                let av = val(*a);
                with_slot!(*a, |da| {
                    if n > T::zero() {
                        for (d, &x) in da.iter_mut().zip(av) {
                            *d += g[0] * x / n;
                        }
                    }
                });
            }
            Op::Normalize { a, norm } => {
                let u = node.value.data();
                let dot: T = u.iter().zip(g).map(|(&x, &y)| x * y).sum();
                with_slot!(*a, |da| {
                    if *norm > T::zero() {
                        for ((d, &gv), &uv) in da.iter_mut().zip(g).zip(u) {
                            *d += (gv - uv * dot) / *norm;
                        }
                    }
                });
            }
            Op::Select { a, index } => {
                let stride = g.len();
                with_slot!(*a, |da| {
                    da[index * stride..(index + 1) * stride].iter_mut().zip(g).for_each(|(d, &v)| *d += v)
                });
            }
            Op::Narrow { a, start } => {
                let lead = node.value.shape()[0];
                let stride = g.len().checked_div(lead).unwrap_or(0);
                with_slot!(*a, |da| {
                    da[start * stride..start * stride + g.len()].iter_mut().zip(g).for_each(|(d, &v)| *d += v)
                });
            }
            Op::Reshape(a) => {
                with_slot!(*a, |da| da.iter_mut().zip(g).for_each(|(d, &v)| *d += v));
            }
        }
    }
}

fn upd<T: Real>(nodes: &[Node<T>], pending: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let len = nodes[v.0].value.numel();
    f(pending[v.0].get_or_insert_with(|| vec![T::zero(); len]));
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
