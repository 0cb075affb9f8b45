//! SGD and Adam with decoupled weight decay and linear warmup.
//!
//! Only parameters present in the gradient set are touched, so frozen or
//! unbound tensors stay bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::transformer::{ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Sgdw,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Heavy-ball momentum for SGD.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Sgdw,
            lr: 1e-4,
            weight_decay: 0.01,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lr) && ok(self.weight_decay) && ok(self.eps)) {
            return Err(invalid("optimizer lr, weight_decay and eps must be finite and non-negative"));
        }
        for (name, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(invalid(format!("optimizer {name} {v} must be in [0, 1)")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid(format!("gradient clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Decay applies to weight matrices only, not to biases, norms or vectors.
fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && !name.contains(".ln.")
}

pub struct Optimizer {
    pub cfg: OptimConfig,
    warmup_steps: usize,
    step: usize,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, warmup_steps: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer { cfg, warmup_steps, step: 0, first: Vec::new(), second: Vec::new() })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        if self.step < self.warmup_steps {
            self.cfg.lr * (self.step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.cfg.lr
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        let lr = self.current_lr();
        let scale = match self.cfg.grad_clip {
            Some(c) => {
                let norm = grads.global_norm();
                if !norm.is_finite() {
                    return Err(crate::error::DvpError::NonFinite { op: "optimizer step" });
                }
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        for (idx, g) in &grads.entries {
            let (name, tensor) = params.by_index_mut(*idx);
            let decay = if decays(name, tensor.shape().len()) { c.weight_decay } else { 0.0 };
            let p = tensor.data_mut();
            if g.len() != p.len() {
                return Err(invalid(format!("gradient for {name} has {} entries, tensor {}", g.len(), p.len())));
            }
            let m = self.first[*idx].get_or_insert_with(|| vec![0.0; p.len()]);
            match c.kind {
                OptimizerKind::Sgdw => {
                    for ((w, &gi), mi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = c.momentum * *mi + scale * gi;
                        *w -= lr * (*mi + decay * *w);
                    }
                }
                OptimizerKind::Adamw => {
                    let v = self.second[*idx].get_or_insert_with(|| vec![0.0; p.len()]);
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for (((w, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = scale * gi;
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                        let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                        *w -= lr * (update + decay * *w);
                    }
                }
            }
        }
        Ok(())
    }
}
