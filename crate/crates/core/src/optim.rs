//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// One update. A non-finite gradient rejects the whole step and leaves
    /// parameters and state untouched.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for ((id, name, p), g) in params.iter().zip(grads) {
            p.check_same_shape(g)?;
            if !g.all_finite() {
                log::warn!("non-finite gradient for {name} (parameter {}); step rejected", id.index());
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = T::lit(1.0 - b1.powi(t));
        let c2 = T::lit(1.0 - b2.powi(t));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(grads[i].data()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
