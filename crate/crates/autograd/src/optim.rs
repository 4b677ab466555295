//! First-order optimizers keyed by parameter name.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

pub trait Optimizer {
    /// Updates `param` in place from `grad` at learning rate `lr`.
    fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64);
}

/// Adam with optional L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, (u64, Tensor, Tensor)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, state: BTreeMap::new() }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (t, m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (0, Tensor::zeros(param.shape().to_vec()), Tensor::zeros(param.shape().to_vec())));
        *t += 1;
        let c1 = 1.0 - b1.powi(*t as i32);
        let c2 = 1.0 - b2.powi(*t as i32);
        let p = param.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let g = grad.data()[i] + wd * p[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let vel = self.velocity.entry(name.to_string()).or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        let p = param.data_mut();
        let v = vel.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i] + wd * p[i];
            v[i] = mu * v[i] + g;
            p[i] -= lr * v[i];
        }
    }
}
