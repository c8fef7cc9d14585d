//! SGD with momentum, decoupled parameter groups, linear learning-rate decay
//! and a warm-up phase.

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, ParamKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lrf: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub warmup_momentum: f64,
    pub warmup_bias_lr: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-2,
            lrf: 1e-2,
            momentum: 0.937,
            weight_decay: 5e-4,
            warmup_epochs: 3.0,
            warmup_momentum: 0.8,
            warmup_bias_lr: 0.1,
            max_grad_norm: 10.0,
        }
    }
}

/// Learning rates and momentum for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub lr_weight: f64,
    pub lr_bias: f64,
    pub momentum: f64,
}

impl OptimConfig {
    /// Rates at `iteration` (0-based, counted over the whole task) of a
    /// task with `epochs` epochs of `iters_per_epoch` steps.
    pub fn rates(&self, iteration: usize, iters_per_epoch: usize, epochs: usize) -> StepRates {
        let epoch = iteration / iters_per_epoch.max(1);
        let frac = epoch as f64 / epochs.max(1) as f64;
        let lr = self.lr0 * ((1.0 - frac) * (1.0 - self.lrf) + self.lrf);
        let warmup_iters = (self.warmup_epochs * iters_per_epoch as f64).round() as usize;
        if iteration < warmup_iters {
            let t = iteration as f64 / warmup_iters as f64;
            StepRates {
                lr_weight: lr * t,
                lr_bias: self.warmup_bias_lr + (lr - self.warmup_bias_lr) * t,
                momentum: self.warmup_momentum + (self.momentum - self.warmup_momentum) * t,
            }
        } else {
            StepRates {
                lr_weight: lr,
                lr_bias: lr,
                momentum: self.momentum,
            }
        }
    }
}

/// Momentum buffers for every parameter of one model.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
    weight_decay: f32,
    max_grad_norm: f64,
}

impl Sgd {
    pub fn new(model: &Detector, cfg: &OptimConfig) -> Self {
        Self {
            velocity: model.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
            weight_decay: cfg.weight_decay as f32,
            max_grad_norm: cfg.max_grad_norm,
        }
    }

    /// Applies accumulated gradients, then clears them. Returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, model: &mut Detector, rates: StepRates) -> f64 {
        let mut params = model.params_mut();
        let norm = params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| (*g as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let clip = if self.max_grad_norm > 0.0 && norm > self.max_grad_norm {
            (self.max_grad_norm / norm) as f32
        } else {
            1.0
        };
        let momentum = rates.momentum as f32;
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let (lr, decay) = match p.kind {
                ParamKind::Weight => (rates.lr_weight as f32, self.weight_decay),
                ParamKind::Bias => (rates.lr_bias as f32, 0.0),
                ParamKind::Norm => (rates.lr_weight as f32, 0.0),
            };
            for ((w, g), vel) in p.value.iter_mut().zip(p.grad.iter_mut()).zip(v.iter_mut()) {
                let grad = *g * clip + decay * *w;
                *vel = momentum * *vel + grad;
                *w -= lr * *vel;
                *g = 0.0;
            }
        }
        norm
    }
}
