//! Post-hoc diagnostics: layer-norm divergence, expert utilization and the
//! tokens-per-expert estimate.

mod divergence;
mod utilization;

pub use divergence::{
    ln_divergence, ln_divergence_brute, mean_pair_distance, model_ln_divergence, DivergenceReport, NormSite,
};
pub use utilization::{expert_utilization, tokens_per_expert_estimate, GroupUtilization, UtilizationSummary};
