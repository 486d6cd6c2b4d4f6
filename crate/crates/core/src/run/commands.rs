//! The four commands as library functions; the binary only parses flags and
//! maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{apply_override, RunConfig};
use crate::analysis::{expert_utilization, model_ln_divergence, tokens_per_expert_estimate, NormSite};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, WideNet, MANIFEST_FILE};
use crate::train::{
    evaluate, read_metrics, DataConfig, JsonlWriter, MetricsRecord, MetricsSink, Split, ToyDataset, TrainState, Trainer,
};
use crate::verify::{run_battery, VerifyOptions, VerifyReport};

pub const CONFIG_ECHO: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.tsv";

/// Headline numbers of one training stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub initial_loss: f64,
    /// Mean `l_main` over the last `min(50, steps)` steps.
    pub final_loss: f64,
    /// Mean balance loss (averaged over groups) over the first and last 10%
    /// of steps.
    pub balance_first: f64,
    pub balance_last: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_loss: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize(records: &[MetricsRecord]) -> Result<RunSummary> {
    let steps: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            MetricsRecord::Step(s) => Some(s),
            _ => None,
        })
        .collect();
    if steps.is_empty() {
        return Err(Error::invalid("metrics stream has no step records"));
    }
    let n = steps.len();
    let tail = n.min(50);
    let tenth = (n / 10).max(1);
    let balance = |s: &crate::train::StepRecord| mean(s.l_balance.iter().copied());
    let last_eval = records.iter().rev().find_map(|r| match r {
        MetricsRecord::Eval(e) => Some(e),
        _ => None,
    });
    Ok(RunSummary {
        steps: n,
        initial_loss: steps[0].l_main,
        final_loss: mean(steps[n - tail..].iter().map(|s| s.l_main)),
        balance_first: mean(steps[..tenth].iter().map(|s| balance(s))),
        balance_last: mean(steps[n - tenth..].iter().map(|s| balance(s))),
        eval_accuracy: last_eval.map(|e| e.accuracy),
        eval_loss: last_eval.map(|e| e.loss),
    })
}

/// One row per group count of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub groups: usize,
    pub summary: RunSummary,
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("groups\teval_accuracy\teval_loss\tfinal_train_loss\n");
    for r in rows {
        let s = &r.summary;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.groups,
            s.eval_accuracy.unwrap_or(f64::NAN),
            s.eval_loss.unwrap_or(f64::NAN),
            s.final_loss
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainResult {
    Single(RunSummary),
    Sweep(Vec<SweepRow>),
}

impl TrainResult {
    pub fn render(&self) -> String {
        match self {
            TrainResult::Single(s) => format!(
                "steps {}\ninitial loss {}\nfinal loss {}\nbalance loss first 10% {} last 10% {}\neval accuracy {}\n",
                s.steps,
                s.initial_loss,
                s.final_loss,
                s.balance_first,
                s.balance_last,
                s.eval_accuracy.map_or("-".into(), |a| a.to_string())
            ),
            TrainResult::Sweep(rows) => render_sweep(rows),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the run directory if one exists.
    pub resume: bool,
    /// Stop after this step even if the schedule is longer.
    pub until: Option<usize>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::config("paths.out_dir", format!("cannot create {}: {e}", dir.display())))
}

/// Runs training (or the configured sweep), writing the config echo,
/// metrics, checkpoints and a summary under `paths.out_dir`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainResult> {
    cfg.validate()?;
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_toml()?)?;
    let Some(sweep) = &cfg.sweep else {
        return train_single(cfg, opts).map(TrainResult::Single);
    };
    let mut rows = Vec::new();
    for &g in &sweep.groups {
        let mut sub = cfg.clone();
        sub.sweep = None;
        sub.model.groups = g;
        sub.paths.out_dir = out.join(format!("groups-{g}"));
        sub.paths.checkpoint = None;
        sub.paths.metrics = None;
        create_dir(&sub.paths.out_dir)?;
        fs::write(sub.paths.out_dir.join(CONFIG_ECHO), sub.to_toml()?)?;
        rows.push(SweepRow {
            groups: g,
            summary: train_single(&sub, opts)?,
        });
    }
    fs::write(out.join(SWEEP_FILE), render_sweep(&rows))?;
    Ok(TrainResult::Sweep(rows))
}

/// Keeps only records of steps before `step`, so a resumed stream matches an
/// uninterrupted one.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let records = read_metrics(path)?;
    let mut w = JsonlWriter::create(path)?;
    for r in records.iter().filter(|r| record_step(r) < step) {
        w.write(r)?;
    }
    w.flush()
}

fn record_step(r: &MetricsRecord) -> usize {
    match r {
        MetricsRecord::Step(s) => s.step,
        MetricsRecord::Routing(r) => r.step,
        MetricsRecord::Eval(e) => e.step,
    }
}

fn train_single(cfg: &RunConfig, opts: &TrainOptions) -> Result<RunSummary> {
    let ckpt = cfg.checkpoint_dir();
    let metrics = cfg.metrics_path();
    if let Some(parent) = metrics.parent() {
        create_dir(parent)?;
    }
    let (mut trainer, mut sink) = if opts.resume && ckpt.join(MANIFEST_FILE).exists() {
        let t = Trainer::resume(&ckpt)?;
        if t.model.config() != &cfg.model || t.config != cfg.train || t.data.config != cfg.data {
            return Err(Error::config(
                "resume",
                format!("checkpoint {} was written with a different config", ckpt.display()),
            ));
        }
        truncate_metrics(&metrics, t.step)?;
        (t, JsonlWriter::append(&metrics)?)
    } else {
        let model = WideNet::new(cfg.model.clone(), cfg.train.seed)?;
        let data = ToyDataset::generate(cfg.data.clone())?;
        (Trainer::new(model, data, cfg.train.clone())?, JsonlWriter::create(&metrics)?)
    };
    let stop = opts.until.unwrap_or(cfg.train.steps);
    let ran = trainer.run_until(stop, &mut sink, Some(&ckpt));
    sink.flush()?;
    ran?;
    if opts.until.is_some_and(|u| u < cfg.train.steps) {
        // interrupted on purpose: leave a checkpoint to resume from
        trainer.save(&ckpt)?;
    }
    let summary = summarize(&read_metrics(&metrics)?)?;
    fs::write(cfg.paths.out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Per-group routing totals of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEval {
    pub group: usize,
    pub expert_share: Vec<f64>,
    pub drop_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub examples: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub groups: Vec<GroupEval>,
}

impl EvalSummary {
    pub fn render(&self) -> String {
        let mut out = format!(
            "examples {}\naccuracy {}\nloss {}\n",
            self.examples, self.accuracy, self.loss
        );
        for g in &self.groups {
            let shares: Vec<String> = g.expert_share.iter().map(|s| format!("{s:.4}")).collect();
            out.push_str(&format!(
                "group {}: expert share [{}] drop rate {}\n",
                g.group,
                shares.join(", "),
                g.drop_rate
            ));
        }
        out
    }
}

/// Evaluates a checkpoint on the eval split of the dataset it was trained
/// on, adjusted by `data_overrides` (`key=value` over the data section).
pub fn eval(checkpoint: &Path, data_overrides: &[String], batch_size: usize) -> Result<EvalSummary> {
    let ck = load_checkpoint(checkpoint)?;
    let state: Option<TrainState> = ck.train_state.map(serde_json::from_value).transpose()?;
    let base = state.as_ref().map(|s| s.data.clone()).unwrap_or_default();
    let data = override_data(&base, data_overrides)?;
    data.validate()?;
    data.check_model(&ck.model.config().embed, ck.model.config().num_classes)?;
    let smoothing = state.as_ref().map_or(0.0, |s| s.train.label_smoothing);
    let ds = ToyDataset::generate(data)?;
    let r = evaluate(&ck.model, &ds, Split::Eval, batch_size, smoothing)?;
    let groups = r
        .routing
        .records
        .iter()
        .map(|rec| {
            let total: usize = rec.expert_counts.iter().sum();
            GroupEval {
                group: rec.layer_or_group,
                expert_share: rec
                    .expert_counts
                    .iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect(),
                drop_rate: rec.drop_rate(),
            }
        })
        .collect();
    Ok(EvalSummary {
        examples: r.examples,
        accuracy: r.accuracy,
        loss: r.loss,
        groups,
    })
}

fn override_data(base: &DataConfig, overrides: &[String]) -> Result<DataConfig> {
    if overrides.is_empty() {
        return Ok(base.clone());
    }
    let mut root = toml::Table::new();
    root.insert(
        "data".into(),
        toml::Value::try_from(base).map_err(|e| Error::config("data", e.to_string()))?,
    );
    for o in overrides {
        let item = if o.starts_with("data.") { o.clone() } else { format!("data.{o}") };
        apply_override(&mut root, &item)?;
    }
    let data = root.remove("data").expect("inserted above");
    data.try_into().map_err(|e: toml::de::Error| Error::config("data", e.to_string().trim().to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Analysis {
    LnDivergence { checkpoint: PathBuf, site: NormSite },
    Utilization { metrics: PathBuf },
    TokensEstimate { inputs: usize, tokens: usize, top_k: usize, experts: usize },
}

/// Runs one analysis, writes its report files into `out_dir` (default: next
/// to the input) and returns the printed text.
pub fn analyze(which: &Analysis, out_dir: Option<&Path>) -> Result<String> {
    let dir_of = |p: &Path| out_dir.map(Path::to_path_buf).unwrap_or_else(|| p.to_path_buf());
    match which {
        Analysis::LnDivergence { checkpoint, site } => {
            let ck = load_checkpoint(checkpoint)?;
            let r = model_ln_divergence(&ck.model, *site)?;
            let dir = dir_of(checkpoint);
            create_dir(&dir)?;
            let name = match site {
                NormSite::Attention => "ln_divergence_attention.json",
                NormSite::Moe => "ln_divergence_moe.json",
            };
            fs::write(dir.join(name), serde_json::to_string_pretty(&r)?)?;
            Ok(format!(
                "site {}\ndistinct norms {}\ny_gamma {}\ny_beta {}\n",
                match site {
                    NormSite::Attention => "attention",
                    NormSite::Moe => "moe",
                },
                r.distinct,
                r.y_gamma,
                r.y_beta
            ))
        }
        Analysis::Utilization { metrics } => {
            let records = read_metrics(metrics)?;
            if records.is_empty() {
                return Err(Error::invalid(format!("{} holds no records", metrics.display())));
            }
            let s = expert_utilization(&records)?;
            let dir = dir_of(metrics.parent().unwrap_or(Path::new(".")));
            create_dir(&dir)?;
            fs::write(dir.join("utilization.json"), serde_json::to_string_pretty(&s)?)?;
            fs::write(dir.join("utilization.csv"), s.to_csv())?;
            let mut out = format!("steps {}\nrouting records per step {}\n", s.steps, s.records_per_step);
            for g in &s.groups {
                let shares: Vec<String> = g.overall_share.iter().map(|v| format!("{v:.4}")).collect();
                out.push_str(&format!(
                    "group {}: share [{}] drop {:.4} tokens/expert {} (estimate {})\n",
                    g.group,
                    shares.join(", "),
                    g.drop_budget,
                    g.empirical_tokens_per_expert,
                    g.estimate
                ));
            }
            Ok(out)
        }
        Analysis::TokensEstimate {
            inputs,
            tokens,
            top_k,
            experts,
        } => {
            let t = tokens_per_expert_estimate(*inputs, *tokens, *top_k, *experts)?;
            Ok(format!("{t}\n(tokens per expert; assumes balanced routing and C near 1)\n"))
        }
    }
}

pub fn verify(opts: &VerifyOptions) -> VerifyReport {
    run_battery(opts)
}
