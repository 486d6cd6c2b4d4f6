//! Run configuration, presets and the command implementations behind the
//! `widenet` binary.

mod commands;
mod config;

pub use commands::{
    analyze, eval, render_sweep, summarize, train, verify, Analysis, EvalSummary, GroupEval, RunSummary, SweepRow,
    TrainOptions, TrainResult, CONFIG_ECHO, SUMMARY_FILE, SWEEP_FILE,
};
pub use config::{apply_override, preset, Paths, RunConfig, SweepConfig, PRESETS};
