//! Adam with per-group learning rates, and the step learning-rate schedule.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// `base` until `decay_epoch` (0-based, exclusive), `base / factor` after.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub factor: f64,
    pub decay_epoch: usize,
}

impl StepSchedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            base: cfg.lr,
            factor: cfg.lr_decay_factor,
            decay_epoch: cfg.lr_decay_epoch,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.base
        } else {
            self.base / self.factor
        }
    }
}

/// Learning rate of each parameter group for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub backbone: f64,
    pub head: f64,
}

impl GroupRates {
    pub fn new(lr: f64, backbone_multiplier: f64) -> Self {
        Self {
            backbone: lr * backbone_multiplier,
            head: lr,
        }
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::Head => self.head,
        }
    }
}

/// Adam with bias correction. Moments are kept in `f64` regardless of the
/// parameter precision.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config<T: Scalar>(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update: `p ← p − lr · m̂ / (√v̂ + eps)`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], rates: GroupRates) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.shape() != p.value.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("gradient {:?} for parameter `{}` {:?}", g.shape(), p.name, p.value.shape()),
                ));
            }
            let lr = rates.get(p.group);
            for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                if lr != 0.0 {
                    let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                    *x = T::of(x.f64() - update);
                }
            }
        }
        Ok(())
    }
}
