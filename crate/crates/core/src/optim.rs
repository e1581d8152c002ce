use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Multiply by `factor` once the epoch index reaches each milestone,
    /// expressed as a fraction of the total epoch count.
    Step { milestones: Vec<f64>, factor: f64 },
    Cosine,
    Constant,
}

impl Schedule {
    /// Decay by 10 after 50% and 75% of the epochs.
    pub fn step_default() -> Self {
        Schedule::Step { milestones: vec![0.5, 0.75], factor: 0.1 }
    }

    /// Epoch indices at which a step schedule decays.
    pub fn milestone_epochs(&self, total_epochs: usize) -> Vec<usize> {
        match self {
            Schedule::Step { milestones, .. } => milestones
                .iter()
                .map(|f| libm::ceil(f * total_epochs as f64 - 1e-9) as usize)
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn lr_at(&self, base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            Schedule::Step { factor, .. } => {
                let passed = self.milestone_epochs(total_epochs).iter().filter(|&&m| epoch >= m).count();
                let mut lr = base_lr;
                for _ in 0..passed {
                    lr *= factor;
                }
                lr
            }
            Schedule::Cosine => {
                if total_epochs == 0 {
                    return base_lr;
                }
                let t = epoch as f64 / total_epochs as f64;
                0.5 * base_lr * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
            Schedule::Constant => base_lr,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + wd·p`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::arg("momentum", format!("{} not in [0, 1)", momentum)));
        }
        if !(0.0..).contains(&weight_decay) {
            return Err(Error::arg("weight_decay", format!("{} must be >= 0", weight_decay)));
        }
        Ok(Sgd { momentum, weight_decay, velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Apply one update. `grads[i]` belongs to `params[i]`; the parameter
    /// list must keep the same order and shapes across steps.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::arg("grads", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::arg("params", format!("optimizer tracks {} parameters, got {}", self.velocity.len(), params.len())));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || v.len() != g.len() {
                return Err(Error::shape("sgd_step", format!("parameter of {} elements, gradient of {}", p.len(), g.len())));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
