use serde::{Deserialize, Serialize};

/// Gradient norm above which updates are rescaled.
pub const CLIP_NORM: f64 = 10.0;

/// Rescales `grads` in place so its L2 norm is at most `max_norm`; returns the
/// original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

pub trait Optimizer {
    /// Applies one update; `grads` may be modified (clipping).
    fn step(&mut self, params: &mut [f64], grads: &mut [f64]);
}

/// Momentum-free SGD with gradient-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub clip: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr, clip: CLIP_NORM }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grads: &mut [f64]) {
        clip_grad_norm(grads, self.clip);
        for (p, g) in params.iter_mut().zip(grads.iter()) {
            *p -= self.lr * g;
        }
    }
}

/// Adam with bias correction and the same gradient clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: CLIP_NORM,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grads: &mut [f64]) {
        clip_grad_norm(grads, self.clip);
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn build(self, lr: f64) -> Box<dyn Optimizer + Send> {
        match self {
            OptimizerKind::Sgd => Box::new(Sgd::new(lr)),
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
        }
    }
}
