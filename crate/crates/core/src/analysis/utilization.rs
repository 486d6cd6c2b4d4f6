//! Expert-utilization summaries over a metrics stream and the
//! tokens-per-expert estimate `T ≈ N_I · N_p · K / E`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::RoutingRecord;
use crate::train::MetricsRecord;

/// Tokens each expert processes over `n_inputs` inputs of `n_tokens` tokens
/// each, assuming balanced routing and capacity ratio near 1.
pub fn tokens_per_expert_estimate(n_inputs: usize, n_tokens: usize, top_k: usize, experts: usize) -> Result<f64> {
    if n_inputs == 0 || n_tokens == 0 || top_k == 0 || experts == 0 {
        return Err(Error::invalid("tokens-per-expert estimate needs all counts >= 1"));
    }
    Ok(n_inputs as f64 * n_tokens as f64 * top_k as f64 / experts as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupUtilization {
    pub group: usize,
    /// `(step, kept share per expert)`.
    pub shares: Vec<(usize, Vec<f64>)>,
    /// Kept share per expert over the whole stream.
    pub overall_share: Vec<f64>,
    /// `(step, drop rate)`.
    pub drop_rates: Vec<(usize, f64)>,
    /// Mean kept assignments per expert over the stream.
    pub empirical_tokens_per_expert: f64,
    /// `tokens · K / E` over the same stream.
    pub estimate: f64,
    /// Dropped fraction of all assignments over the stream.
    pub drop_budget: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSummary {
    pub steps: usize,
    /// Routing records per step (the number of routing groups).
    pub records_per_step: usize,
    pub groups: Vec<GroupUtilization>,
}

fn shares(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Summarizes the `routing` records of a metrics stream.
pub fn expert_utilization(records: &[MetricsRecord]) -> Result<UtilizationSummary> {
    let routing: Vec<&RoutingRecord> = records
        .iter()
        .filter_map(|r| match r {
            MetricsRecord::Routing(r) => Some(r),
            _ => None,
        })
        .collect();
    if routing.is_empty() {
        return Err(Error::invalid("metrics stream has no routing records"));
    }
    let mut by_group: BTreeMap<usize, Vec<&RoutingRecord>> = BTreeMap::new();
    let mut per_step: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &routing {
        by_group.entry(r.layer_or_group).or_default().push(r);
        *per_step.entry(r.step).or_default() += 1;
    }
    let records_per_step = *per_step.values().max().unwrap_or(&0);
    let mut groups = Vec::new();
    for (group, recs) in by_group {
        let e = recs[0].expert_counts.len();
        if let Some(bad) = recs.iter().find(|r| r.expert_counts.len() != e) {
            return Err(Error::invalid(format!(
                "step {}: group {group} has {} experts, expected {e}",
                bad.step,
                bad.expert_counts.len()
            )));
        }
        let mut totals = vec![0usize; e];
        let (mut tokens, mut assignments, mut dropped) = (0usize, 0usize, 0usize);
        for r in &recs {
            totals.iter_mut().zip(&r.expert_counts).for_each(|(t, c)| *t += c);
            tokens += r.tokens;
            assignments += r.assignments;
            dropped += r.dropped;
        }
        let top_k = if tokens == 0 { 0 } else { assignments / tokens };
        groups.push(GroupUtilization {
            group,
            shares: recs.iter().map(|r| (r.step, shares(&r.expert_counts))).collect(),
            overall_share: shares(&totals),
            drop_rates: recs.iter().map(|r| (r.step, r.drop_rate())).collect(),
            empirical_tokens_per_expert: totals.iter().sum::<usize>() as f64 / e as f64,
            estimate: tokens as f64 * top_k as f64 / e as f64,
            drop_budget: if assignments == 0 {
                0.0
            } else {
                dropped as f64 / assignments as f64
            },
        });
    }
    Ok(UtilizationSummary {
        steps: per_step.len(),
        records_per_step,
        groups,
    })
}

impl UtilizationSummary {
    /// Plot-ready rows `step,series,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,series,value\n");
        for g in &self.groups {
            for (step, s) in &g.shares {
                for (i, v) in s.iter().enumerate() {
                    out.push_str(&format!("{step},group{}.expert{i}.share,{v}\n", g.group));
                }
            }
            for (step, d) in &g.drop_rates {
                out.push_str(&format!("{step},group{}.drop_rate,{d}\n", g.group));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize, group: usize, counts: Vec<usize>, dropped: usize) -> MetricsRecord {
        let tokens = 8;
        MetricsRecord::Routing(RoutingRecord {
            step,
            layer_or_group: group,
            expert_counts: counts,
            dropped,
            balance_loss: 2.0,
            tokens,
            assignments: tokens * 2,
            dispatch_fractions: vec![0.5; 4],
        })
    }

    #[test]
    fn estimate_worked_values() {
        assert_eq!(tokens_per_expert_estimate(1000, 16, 2, 4).unwrap(), 8000.0);
        assert_eq!(tokens_per_expert_estimate(10, 16, 4, 4).unwrap(), 160.0);
        assert_eq!(tokens_per_expert_estimate(10, 16, 2, 8).unwrap(), 40.0);
    }

    #[test]
    fn uniform_routing_shares() {
        let recs = vec![record(0, 0, vec![4, 4, 4, 4], 0), record(1, 0, vec![4, 4, 4, 4], 0)];
        let s = expert_utilization(&recs).unwrap();
        assert_eq!(s.records_per_step, 1);
        assert!(s.groups[0].overall_share.iter().all(|&v| v == 0.25));
        assert_eq!(s.groups[0].empirical_tokens_per_expert, s.groups[0].estimate);
    }

    #[test]
    fn empty_stream_errors() {
        assert!(expert_utilization(&[]).is_err());
    }

    #[test]
    fn csv_header() {
        let s = expert_utilization(&[record(0, 0, vec![5, 3, 4, 2], 2)]).unwrap();
        let csv = s.to_csv();
        assert!(csv.starts_with("step,series,value\n0,group0.expert0.share,"));
    }
}
