use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Step-decay SGD hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// The learning rate is divided by `factor` every `interval` epochs.
    pub factor: f64,
    pub interval: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { base_lr: 0.1, factor: 10.0, interval: 100, momentum: 0.0, weight_decay: 0.0 }
    }
}

impl OptimConfig {
    /// Desk-scale defaults: decay every 10 epochs.
    pub fn desk() -> Self {
        OptimConfig { interval: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.factor >= 1.0 && self.factor.is_finite()) {
            return Err(Error::Config(format!("lr factor must be >= 1, got {}", self.factor)));
        }
        if self.interval == 0 {
            return Err(Error::Config("lr interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// `base_lr / factor^floor(epoch / interval)`.
pub fn lr_at(epoch: usize, config: &OptimConfig) -> f64 {
    let k = (epoch / config.interval.max(1)) as i32;
    config.base_lr / config.factor.powi(k)
}

/// Plain or momentum SGD over the trainable entries of a store.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: OptimConfig,
    pub lr: f64,
    /// One buffer per store entry; empty until momentum is first used.
    pub velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: OptimConfig) -> Self {
        let lr = config.base_lr;
        Sgd { config, lr, velocity: Vec::new() }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = lr_at(epoch, &self.config);
    }

    /// `p ← p − lr·(v)` with `v = μ·v + g + wd·p` (or `v = g + wd·p` without
    /// momentum). Buffers are left alone. A non-finite gradient aborts the
    /// step before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for e in store.entries().iter().filter(|e| e.trainable) {
            if let Some(i) = e.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in `{}` at flat index {i} (shape {:?})",
                    e.grad.data()[i],
                    e.name,
                    e.grad.shape()
                )));
            }
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let lr = T::c(self.lr);
        let mu = T::c(self.config.momentum);
        let wd = T::c(self.config.weight_decay);
        let use_momentum = self.config.momentum > 0.0;
        for (e, vel) in store.entries_mut().iter_mut().zip(&mut self.velocity) {
            if !e.trainable {
                continue;
            }
            if use_momentum {
                let v = vel.get_or_insert_with(|| Tensor::zeros(e.value.shape()));
                for ((p, &g), v) in e.value.data_mut().iter_mut().zip(e.grad.data()).zip(v.data_mut()) {
                    *v = mu * *v + g + wd * *p;
                    *p = *p - lr * *v;
                }
            } else {
                for (p, &g) in e.value.data_mut().iter_mut().zip(e.grad.data()) {
                    *p = *p - lr * (g + wd * *p);
                }
            }
        }
        Ok(())
    }
}
