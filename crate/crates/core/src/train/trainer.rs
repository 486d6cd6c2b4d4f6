//! The training and evaluation loops.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::{DataConfig, Split, ToyDataset};
use super::loss::total_loss_on_tape;
use super::metrics::{EvalRecord, MetricsRecord, MetricsSink, StepRecord};
use super::optim::{Optimizer, OptimizerSettings};
use super::schedule::lr_at;
use super::seeds::mix;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ForwardOptions, WideNet};
use crate::moe::{CombineWeights, RoutingRecord, RoutingReport};
use crate::tensor::{RngStream, Tape, Tensor};

const NOISE_TAG: u64 = 0x6e6f_6973_65;

/// Everything a checkpoint needs beyond tensors to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next step to run.
    pub step: usize,
    pub optimizer_step: u64,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub examples: usize,
    /// Per-group routing totals over the split.
    pub routing: RoutingReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub record: StepRecord,
    pub routing: Vec<RoutingRecord>,
}

fn index_of_max(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| index_of_max(row) == l)
        .count()
}

/// Deterministic evaluation without routing noise or dropout.
pub fn evaluate(model: &WideNet, data: &ToyDataset, split: Split, batch_size: usize, smoothing: f64) -> Result<EvalReport> {
    let n = data.len(split);
    if n == 0 {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("eval batch size must be >= 1"));
    }
    let mut hits = 0;
    let mut loss_sum = 0.0;
    let mut routing = RoutingReport::default();
    let mut rng = RngStream::new(0);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        start += idx.len();
        let (batch, labels) = data.batch(split, &idx)?;
        let mut tape = Tape::no_grad();
        let out = model.forward(&mut tape, &batch, ForwardOptions::eval(), &mut rng)?;
        let l = tape.cross_entropy(out.logits, &labels, smoothing)?;
        loss_sum += tape.value(l).item()? * idx.len() as f64;
        hits += correct(tape.value(out.logits), &labels);
        if !out.plans.is_empty() {
            let outcomes: Vec<_> = out.plans.iter().map(|p| p.outcome.clone()).collect();
            routing.accumulate(&crate::moe::routing_report(0, &outcomes)?);
        }
    }
    Ok(EvalReport {
        accuracy: hits as f64 / n as f64,
        loss: loss_sum / n as f64,
        examples: n,
        routing,
    })
}

pub struct Trainer {
    pub model: WideNet,
    pub data: ToyDataset,
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    /// Next step to run.
    pub step: usize,
    /// Gate weighting used in the combine (only changed by fault injection).
    pub combine: CombineWeights,
}

fn abort(step: usize, term: impl Into<String>) -> Error {
    Error::NumericalAbort {
        step,
        term: term.into(),
    }
}

fn finite(step: usize, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(abort(step, term))
    }
}

impl Trainer {
    pub fn new(model: WideNet, data: ToyDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        data.config.check_model(&model.config().embed, model.config().num_classes)?;
        let optimizer = Optimizer::new(OptimizerSettings::from(&config), model.params());
        Ok(Self {
            model,
            data,
            config,
            optimizer,
            step: 0,
            combine: CombineWeights::Raw,
        })
    }

    /// Balance-loss weight in effect.
    pub fn lambda(&self) -> f64 {
        self.config.lambda.unwrap_or(self.model.config().balance_weight)
    }

    pub fn lr(&self, step: usize) -> f64 {
        let c = &self.config;
        lr_at(c.schedule, step + 1, c.warmup, c.steps, c.lr)
    }

    /// Routing-noise stream for `step`; positioned by the step alone.
    pub fn noise_stream(&self, step: usize) -> RngStream {
        RngStream::new(mix(&[self.config.seed, NOISE_TAG, step as u64]))
    }

    /// One forward/backward/update. Non-finite values abort with the step
    /// and the offending term.
    pub fn train_step(&mut self) -> Result<StepOutput> {
        let step = self.step;
        let (batch, labels) = self.data.train_batch(step, self.config.batch_size)?;
        let mut rng = self.noise_stream(step);
        let lambda = self.lambda();
        let mut tape = Tape::new();
        let numerics = |e: Error| match e {
            Error::NonFinite { op } => abort(step, format!("forward ({op})")),
            other => other,
        };
        let opts = ForwardOptions {
            training: true,
            trace: false,
            combine: self.combine,
        };
        let out = self.model.forward(&mut tape, &batch, opts, &mut rng).map_err(numerics)?;
        let loss = total_loss_on_tape(
            &mut tape,
            out.logits,
            &labels,
            self.config.label_smoothing,
            &out.plans,
            lambda,
        )
        .map_err(numerics)?;
        let l_main = finite(step, "l_main", tape.value(loss.main).item()?)?;
        let mut l_balance = Vec::with_capacity(loss.balance.len());
        for (g, &b) in loss.balance.iter().enumerate() {
            l_balance.push(finite(step, &format!("l_balance[{g}]"), tape.value(b).item()?)?);
        }
        let total = finite(step, "total", tape.value(loss.total).item()?)?;
        let accuracy = correct(tape.value(out.logits), &labels) as f64 / labels.len() as f64;

        self.model.params_mut().zero_grad();
        tape.backward_into(loss.total, self.model.params_mut()).map_err(numerics)?;
        let grad_norm = finite(step, "gradient", self.model.params().grad_norm())?;
        let scale = match self.config.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = self.lr(step);
        self.optimizer
            .step(self.model.params_mut(), lr, scale)
            .map_err(|e| match e {
                Error::NonFinite { .. } => abort(step, "parameters"),
                other => other,
            })?;

        let routing: Vec<RoutingRecord> = out
            .plans
            .iter()
            .enumerate()
            .map(|(g, p)| RoutingRecord::from_outcome(step, g, &p.outcome))
            .collect();
        let dropped: usize = routing.iter().map(|r| r.dropped).sum();
        let assigned: usize = routing.iter().map(|r| r.assignments).sum();
        self.step += 1;
        Ok(StepOutput {
            record: StepRecord {
                step,
                l_main,
                l_balance,
                total,
                lr,
                drop_rate: if assigned == 0 { 0.0 } else { dropped as f64 / assigned as f64 },
                accuracy,
                grad_norm,
            },
            routing,
        })
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(
            &self.model,
            &self.data,
            Split::Eval,
            self.config.eval_batch_size,
            self.config.label_smoothing,
        )
    }

    fn eval_record(&self, step: usize) -> Result<MetricsRecord> {
        let r = self.evaluate()?;
        Ok(MetricsRecord::Eval(EvalRecord {
            step,
            accuracy: r.accuracy,
            loss: r.loss,
            drop_rates: r.routing.drop_rates(),
        }))
    }

    /// Runs until `stop` (capped at the configured step count), streaming
    /// records to `sink` and writing checkpoints into `checkpoint_dir` at the
    /// configured cadence and when the run completes.
    pub fn run_until(&mut self, stop: usize, sink: &mut dyn MetricsSink, checkpoint_dir: Option<&Path>) -> Result<()> {
        let stop = stop.min(self.config.steps);
        while self.step < stop {
            let out = self.train_step()?;
            let step = out.record.step;
            sink.write(&MetricsRecord::Step(out.record))?;
            for r in out.routing {
                sink.write(&MetricsRecord::Routing(r))?;
            }
            let last = self.step == self.config.steps;
            let every = |n: usize| n > 0 && (step + 1) % n == 0;
            if every(self.config.eval_every) || last {
                sink.write(&self.eval_record(step)?)?;
            }
            if let Some(dir) = checkpoint_dir {
                if every(self.config.checkpoint_every) || last {
                    self.save(dir)?;
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self, sink: &mut dyn MetricsSink, checkpoint_dir: Option<&Path>) -> Result<()> {
        self.run_until(self.config.steps, sink, checkpoint_dir)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            optimizer_step: self.optimizer.state.step,
            train: self.config.clone(),
            data: self.data.config.clone(),
        }
    }

    /// Writes model, optimizer slots and [`TrainState`].
    pub fn save(&self, dir: &Path) -> Result<()> {
        let state = serde_json::to_value(self.state())?;
        save_checkpoint(dir, &self.model, &self.optimizer.named_slots(), Some(&state))
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let ck = load_checkpoint(dir)?;
        let state: TrainState = match ck.train_state {
            Some(v) => serde_json::from_value(v)?,
            None => return Err(Error::Checkpoint("checkpoint has no training state".into())),
        };
        let data = ToyDataset::generate(state.data.clone())?;
        let mut t = Trainer::new(ck.model, data, state.train)?;
        t.optimizer.restore_slots(state.optimizer_step, &ck.extra)?;
        t.step = state.step;
        Ok(t)
    }
}
