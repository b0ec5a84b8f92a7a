use serde::{Deserialize, Serialize};

use crate::tensor::Real;

use super::network::Network;

/// SGD with momentum, weight decay and a single-step learning rate drop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied once `iteration` reaches `lr_drop_iter`.
    pub gamma: f64,
    pub iteration: usize,
    pub lr_drop_iter: usize,
    pub max_iter: usize,
}

impl OptimState {
    pub fn new(base_lr: f64, max_iter: usize) -> Self {
        assert!(base_lr >= 0.0);
        OptimState {
            base_lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            gamma: 0.1,
            iteration: 0,
            lr_drop_iter: max_iter * 7 / 10,
            max_iter,
        }
    }

    pub fn lr(&self) -> f64 {
        if self.iteration >= self.lr_drop_iter {
            self.base_lr * self.gamma
        } else {
            self.base_lr
        }
    }
}

/// One update from the accumulated gradients:
/// `v = momentum * v - lr * (grad + weight_decay * w); w += v`.
pub fn sgd_step<T: Real>(net: &mut Network<T>, optim: &mut OptimState) {
    let lr = T::from_f64c(optim.lr());
    let mu = T::from_f64c(optim.momentum);
    let wd = T::from_f64c(optim.weight_decay);
    for p in net.params_mut() {
        let w = p.value.data_mut();
        let g = p.grad.data();
        let v = p.velocity.data_mut();
        for i in 0..w.len() {
            v[i] = mu * v[i] - lr * (g[i] + wd * w[i]);
            w[i] += v[i];
        }
    }
    optim.iteration += 1;
}
