use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to zero.
    #[default]
    Cosine,
    /// Linear warmup, then constant.
    Constant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    Adam,
}

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup: usize,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Overrides the model's balance-loss weight when set.
    pub lambda: Option<f64>,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            warmup: 100,
            schedule: Schedule::Cosine,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            seed: 0,
            lambda: None,
            eval_every: 0,
            checkpoint_every: 0,
            grad_clip: Some(1.0),
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.steps == 0 {
            return fail("train.steps", "must be >= 1".into());
        }
        if self.warmup > self.steps {
            return fail(
                "train.warmup",
                format!("warmup {} exceeds total steps {}", self.warmup, self.steps),
            );
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("train.batch_size", "must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("train.lr", format!("must be > 0, got {}", self.lr));
        }
        for (name, v) in [
            ("train.momentum", self.momentum),
            ("train.beta1", self.beta1),
            ("train.beta2", self.beta2),
            ("train.label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(name, format!("must be in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("train.adam_eps", "must be > 0".into());
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return fail("train.lambda", format!("must be >= 0, got {l}"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail("train.grad_clip", format!("must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_beyond_steps_rejected() {
        let c = TrainConfig {
            steps: 10,
            warmup: 11,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "train.warmup"));
    }

    #[test]
    fn optimizer_names() {
        let c: TrainConfig = toml::from_str("optimizer = \"sgd-momentum\"\nschedule = \"constant\"").unwrap();
        assert_eq!(c.optimizer, OptimizerKind::SgdMomentum);
        assert_eq!(c.schedule, Schedule::Constant);
    }
}
