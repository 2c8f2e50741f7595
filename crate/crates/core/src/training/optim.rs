//! Adam with L2 regularization, and global-norm gradient clipping.

use crate::autodiff::Parameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    /// Apply the L2 term directly to the weights (`θ ← θ − lr·λ·θ`) instead
    /// of adding `λ·θ` to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 1e-6,
            decoupled: false,
        }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update at step `t` (1-based) on a single tensor.
pub fn adam_update(theta: &mut [f64], grad: &[f64], mom: &mut Moments, t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let mut g = grad[i];
        if !cfg.decoupled {
            g += cfg.l2 * theta[i];
        }
        let m = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
        mom.m[i] = m;
        mom.v[i] = v;
        let mut step = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        if cfg.decoupled {
            step += cfg.lr * cfg.l2 * theta[i];
        }
        theta[i] -= step;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("optimizer state was built for {expected} tensors, model has {found}")]
    TensorCount { expected: usize, found: usize },
    #[error("parameter {name} has {found} values, optimizer state expects {expected}")]
    Shape {
        name: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new<M: Parameters>(model: &M, config: AdamConfig) -> Self {
        let moments = model
            .named_params()
            .iter()
            .map(|(_, t)| Moments::new(t.len()))
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    /// Updates every parameter from its accumulated gradient.
    pub fn step<M: Parameters>(&mut self, model: &mut M) -> Result<(), OptimError> {
        let mut params = model.named_params_mut();
        if params.len() != self.moments.len() {
            return Err(OptimError::TensorCount {
                expected: self.moments.len(),
                found: params.len(),
            });
        }
        for ((name, t), mom) in params.iter().zip(&self.moments) {
            if t.len() != mom.m.len() {
                return Err(OptimError::Shape {
                    name: name.clone(),
                    expected: mom.m.len(),
                    found: t.len(),
                });
            }
        }
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        for ((_, p), mom) in params.iter_mut().zip(&mut self.moments) {
            p.update_with(|theta, grad| adam_update(theta, grad, mom, t, &cfg));
        }
        Ok(())
    }
}

pub fn global_grad_norm<M: Parameters>(model: &M) -> f64 {
    model
        .named_params()
        .iter()
        .map(|(_, t)| t.grad_sum_sq())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping happened).
pub fn clip_global_norm<M: Parameters>(model: &M, max_norm: f64) -> f64 {
    let norm = global_grad_norm(model);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    for (_, t) in model.named_params() {
        t.scale_grad(factor);
    }
    factor
}
