//! Adam optimization and the step-decay learning-rate schedule.

use crate::params::ParamSet;
use crate::tensor::{Element, Tensor};

/// Adam moment coefficients; canonical defaults.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            step: 0,
        }
    }

    pub fn from_parts(m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, step: u64) -> Self {
        Self { m, v, step }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One Adam update with bias correction, consuming the gradients
    /// currently held in `params`.
    pub fn adam_step(&mut self, params: &mut ParamSet<T>, cfg: &AdamConfig, lr: f64) {
        self.step += 1;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let corr1 = T::from_f64(1.0 - cfg.beta1.powi(self.step as i32));
        let corr2 = T::from_f64(1.0 - cfg.beta2.powi(self.step as i32));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(cfg.eps);

        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((w, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Step decay: `lr0 * decay_rate^floor(epoch / decay_step)`.
pub fn lr_schedule(epoch: usize, lr0: f64, decay_step: usize, decay_rate: f64) -> f64 {
    lr0 * decay_rate.powi((epoch / decay_step) as i32)
}
