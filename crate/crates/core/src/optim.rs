//! First-order optimizers applied to natural-parameter deltas.
//!
//! The delta a client sends is treated as a gradient: an optimizer maps it to
//! a step, and the caller adds `δ · step` to the parameters. [`Optimizer::apply`]
//! returns the step only.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adagrad { tau: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// Plain SGD without momentum; with `lr = 1` this is the identity map.
    pub const IDENTITY: OptimizerKind = OptimizerKind::SgdMomentum { momentum: 0.0 };

    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl OptimizerConfig {
    pub fn identity() -> Self {
        Self {
            kind: OptimizerKind::IDENTITY,
            lr: 1.0,
        }
    }
}

/// An optimizer with its per-coordinate accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    /// Momentum buffer, squared-gradient sum, or Adam first moment.
    slot_a: Vec<f64>,
    /// Adam second moment.
    slot_b: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            slot_a: Vec::new(),
            slot_b: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Transforms `g` into a step and advances the accumulators. The first
    /// call fixes the dimension.
    pub fn apply(&mut self, g: &[f64]) -> Result<Vec<f64>> {
        if self.step == 0 && self.slot_a.is_empty() {
            self.slot_a = vec![0.0; g.len()];
            if matches!(self.config.kind, OptimizerKind::Adam { .. }) {
                self.slot_b = vec![0.0; g.len()];
            }
        }
        check_dim(self.slot_a.len(), g.len())?;
        self.step += 1;
        let lr = self.config.lr;
        let out = match self.config.kind {
            OptimizerKind::SgdMomentum { momentum } => self
                .slot_a
                .iter_mut()
                .zip(g)
                .map(|(v, &gi)| {
                    *v = momentum * *v + gi;
                    lr * *v
                })
                .collect(),
            OptimizerKind::Adagrad { tau } => self
                .slot_a
                .iter_mut()
                .zip(g)
                .map(|(acc, &gi)| {
                    *acc += gi * gi;
                    let denom = acc.sqrt() + tau;
                    if denom == 0.0 {
                        0.0
                    } else {
                        lr * gi / denom
                    }
                })
                .collect(),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                self.slot_a
                    .iter_mut()
                    .zip(self.slot_b.iter_mut())
                    .zip(g)
                    .map(|((m, v), &gi)| {
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        lr * (*m / c1) / ((*v / c2).sqrt() + eps)
                    })
                    .collect()
            }
        };
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.slot_a.clear();
        self.slot_b.clear();
    }
}
