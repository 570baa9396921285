use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults: lr 2e-4, beta1 0.5, beta2 0.999, eps 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn for_param(param: &Tensor<T>) -> Self {
        Self {
            m: Tensor::zeros(param.dims()),
            v: Tensor::zeros(param.dims()),
            step: 0,
        }
    }

    /// Bias-corrected Adam update of `param` from its gradient slot; the
    /// slot is cleared afterwards.
    pub fn step(&mut self, param: &mut Tensor<T>, cfg: &AdamConfig) -> Result<()> {
        if self.m.dims() != param.dims() || self.v.dims() != param.dims() {
            return Err(Error::Contract(format!(
                "adam moments {:?} do not match parameter {:?}",
                self.m.dims(),
                param.dims()
            )));
        }
        let grad = param
            .take_grad()
            .ok_or_else(|| Error::Contract("adam step on a parameter without a gradient".into()))?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::lit(1.0 - cfg.beta1.powi(t));
        let c2 = T::lit(1.0 - cfg.beta2.powi(t));
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        let (m, v) = (self.m.data_mut(), self.v.data_mut());
        for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}
