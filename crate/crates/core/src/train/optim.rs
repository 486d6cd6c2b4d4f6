//! SGD with momentum and an Adam-style optimizer.

use serde::{Deserialize, Serialize};

use super::config::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Per-parameter slots (momentum / first moment, second moment) and the
/// update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    /// Empty for SGD.
    pub second: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for OptimizerSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            kind: c.optimizer,
            momentum: c.momentum,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub settings: OptimizerSettings,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        let second = match settings.kind {
            OptimizerKind::Adam => zeros(),
            OptimizerKind::SgdMomentum => Vec::new(),
        };
        Self {
            settings,
            state: OptimizerState {
                step: 0,
                first: zeros(),
                second,
            },
        }
    }

    /// Applies one update with gradients scaled by `grad_scale` (used for
    /// clipping). Parameters without a gradient buffer are skipped.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64, grad_scale: f64) -> Result<()> {
        if self.state.first.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} slots for {} parameters",
                self.state.first.len(),
                params.len()
            )));
        }
        self.state.step += 1;
        let t = self.state.step as f64;
        let s = self.settings;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let m = &mut self.state.first[i];
            if m.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    left: p.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
            match s.kind {
                OptimizerKind::SgdMomentum => {
                    let m = m.data_mut();
                    let w = p.data_mut();
                    for j in 0..w.len() {
                        m[j] = s.momentum * m[j] + g[j] * grad_scale;
                        w[j] -= lr * m[j];
                    }
                }
                OptimizerKind::Adam => {
                    let (c1, c2) = (1.0 - s.beta1.powf(t), 1.0 - s.beta2.powf(t));
                    let m = m.data_mut();
                    let v = self.state.second[i].data_mut();
                    let w = p.data_mut();
                    for j in 0..w.len() {
                        let gj = g[j] * grad_scale;
                        m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * gj;
                        v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * gj * gj;
                        w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + s.eps);
                    }
                }
            }
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer_step" });
            }
        }
        Ok(())
    }

    /// Slots as named tensors for checkpointing.
    pub fn named_slots(&self) -> Vec<(String, Tensor)> {
        let first = self.state.first.iter().enumerate().map(|(i, t)| (format!("optim.first.{i}"), t.clone()));
        let second = self.state.second.iter().enumerate().map(|(i, t)| (format!("optim.second.{i}"), t.clone()));
        first.chain(second).collect()
    }

    /// Restores slots written by [`Optimizer::named_slots`].
    pub fn restore_slots(&mut self, step: u64, named: &[(String, Tensor)]) -> Result<()> {
        let fill = |prefix: &str, slots: &mut Vec<Tensor>| -> Result<()> {
            for (i, slot) in slots.iter_mut().enumerate() {
                let name = format!("{prefix}.{i}");
                let t = named
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer slot {name}")))?;
                slot.assign(&t.1)
                    .map_err(|_| Error::Checkpoint(format!("optimizer slot {name} has the wrong shape")))?;
            }
            Ok(())
        };
        fill("optim.first", &mut self.state.first)?;
        fill("optim.second", &mut self.state.second)?;
        self.state.step = step;
        Ok(())
    }
}
