use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction. Weight decay is added to the gradient as
/// `weight_decay * θ` before the moment updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam { config, t: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update. A non-finite gradient aborts the step before any
    /// parameter or moment changes.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = lit::<T>(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = lit::<T>(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps, wd) = (lit::<T>(c.lr), lit::<T>(c.eps), lit::<T>(c.weight_decay));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi + wd * *pi;
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64([1], &[v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![scalar(0.7)];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[scalar(0.0)]).unwrap();
        assert_eq!(p[0].data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        for g in [3.0, -0.2, 1e-3] {
            let mut p = vec![scalar(1.0)];
            let mut opt = Adam::new(cfg, &p);
            opt.step(&mut p, &[scalar(g)]).unwrap();
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps)
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p[0].data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() };
        let mut p = vec![scalar(2.0)];
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &[scalar(0.0)]).unwrap();
        assert!((p[0].data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut p = vec![scalar(1.0)];
        let mut opt = Adam::new(cfg, &p);
        for _ in 0..500 {
            let g = scalar(2.0 * p[0].data()[0]);
            opt.step(&mut p, &[g]).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-2, "{}", p[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut p = vec![scalar(1.0), scalar(2.0)];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let err = opt.step(&mut p, &[scalar(1.0), scalar(f64::NAN)]).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(opt.t, 0);
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(opt.m[0].data(), &[0.0]);
    }
}
