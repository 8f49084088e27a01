use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ParamSet};

/// `lr0 · decay^⌊completed_epochs / every⌋`.
pub fn staircase_lr(lr0: f64, decay: f64, every: usize, completed_epochs: usize) -> f64 {
    lr0 * decay.powi((completed_epochs / every) as i32)
}

/// RMSProp with per-parameter mean-square accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub alpha: f64,
    pub eps: f64,
    pub steps: u64,
    /// Learning rate used by the most recent step.
    pub lr: f64,
    pub accumulators: BTreeMap<String, Vec<f64>>,
}

impl RmsProp {
    pub fn new(alpha: f64, eps: f64) -> Self {
        Self {
            alpha,
            eps,
            steps: 0,
            lr: 0.0,
            accumulators: BTreeMap::new(),
        }
    }

    /// `v ← αv + (1−α)g²`, `θ ← θ − lr·g/(√v + ε)`. Rejects the whole step,
    /// leaving parameters untouched, if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        for (name, theta) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != theta.numel() {
                return Err(Error::Dimension {
                    op: "rmsprop",
                    lhs: theta.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let v = self
                .accumulators
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((t, &gi), vi) in theta.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.alpha * *vi + (1.0 - self.alpha) * gi * gi;
                *t -= lr * gi / (vi.sqrt() + self.eps);
            }
        }
        self.steps += 1;
        self.lr = lr;
        Ok(())
    }
}
