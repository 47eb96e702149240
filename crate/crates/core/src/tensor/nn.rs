use serde::{Deserialize, Serialize};

use super::{lit, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// LSTM parameters bound to a tape. Gate order along the `4·hidden` axis is
/// input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    /// `[4·hidden, input]`
    pub w_ih: Var,
    /// `[4·hidden, hidden]`
    pub w_hh: Var,
    /// `[4·hidden]`
    pub bias: Var,
}

/// One step of the LSTM recurrence; returns `(h', c')`.
pub fn lstm_step<T: Real>(tape: &mut Tape<T>, x: Var, (h, c): (Var, Var), p: &LstmVars) -> Result<(Var, Var)> {
    let hidden = tape.value(h).numel();
    let ws = tape.value(p.w_hh).shape();
    if ws != [4 * hidden, hidden] || tape.value(c).shape() != [hidden] || tape.value(h).shape() != [hidden] {
        return Err(Error::shape(
            "lstm_step",
            format!("state {:?}/{:?} with recurrent weight {:?}", tape.value(h).shape(), tape.value(c).shape(), ws),
        ));
    }
    let zx = tape.linear(x, p.w_ih, Some(p.bias))?;
    let zh = tape.linear(h, p.w_hh, None)?;
    let z = tape.add(zx, zh)?;
    let gi = tape.narrow(z, 0, hidden)?;
    let gf = tape.narrow(z, hidden, hidden)?;
    let gg = tape.narrow(z, 2 * hidden, hidden)?;
    let go = tape.narrow(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let cand = tape.tanh(gg);
    let o = tape.sigmoid(go);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, cand)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch statistics observed in one train-mode forward.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance over the `count` values per channel.
    pub var: Vec<T>,
    pub count: usize,
}

/// Running moments of a batch-norm layer. The affine scale and shift are
/// ordinary parameters and live with the owning model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm2d<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Number of train-mode updates applied to the running moments.
    pub updates: u64,
}

impl<T: Real> BatchNorm2d<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Applies batch normalization. In train mode the batch statistics are
    /// returned so the caller can fold them in with [`BatchNorm2d::update`];
    /// this keeps the forward pass free of shared mutation.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        match mode {
            BnMode::Train => {
                let shape = tape.value(x).shape();
                let c = if shape.len() == 4 { shape[1] } else { shape.first().copied().unwrap_or(0) };
                let count = tape.value(x).numel() / c.max(1);
                let (y, mean, var) = tape.batchnorm2d_train(x, gamma, beta, self.eps)?;
                Ok((y, Some(BatchStats { mean, var, count })))
            }
            BnMode::Eval => {
                if self.updates == 0 {
                    log::warn!("batch norm evaluated before any training update; using initial moments");
                }
                let y = tape.batchnorm2d_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.eps)?;
                Ok((y, None))
            }
        }
    }

    /// Exponential moving average of the moments; the variance is stored
    /// unbiased.
    pub fn update(&mut self, stats: &BatchStats<T>) {
        let m = lit::<T>(self.momentum);
        let keep = T::one() - m;
        let correction =
            if stats.count > 1 { lit::<T>(stats.count as f64 / (stats.count - 1) as f64) } else { T::one() };
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * correction;
        }
        self.updates += 1;
    }

    pub fn moments_as_tensors(&self) -> (Tensor<T>, Tensor<T>) {
        let c = self.channels();
        (
            Tensor::new(vec![c], self.running_mean.clone()).expect("mean"),
            Tensor::new(vec![c], self.running_var.clone()).expect("var"),
        )
    }
}
