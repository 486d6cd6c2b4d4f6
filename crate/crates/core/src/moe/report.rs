use serde::{Deserialize, Serialize};

use super::balance::balance_loss;
use super::routing::RoutingOutcome;
use crate::error::{Error, Result};

/// Summary of one routing operation at one step. This is the `routing`
/// record of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub step: usize,
    /// Routing group (equal to the block index when every block routes).
    pub layer_or_group: usize,
    /// Kept assignments per expert.
    pub expert_counts: Vec<usize>,
    pub dropped: usize,
    pub balance_loss: f64,
    /// Tokens routed.
    pub tokens: usize,
    /// Total assignments before capacity (`K · tokens`).
    pub assignments: usize,
    /// Dispatch fractions `m`.
    pub dispatch_fractions: Vec<f64>,
}

impl RoutingRecord {
    pub fn from_outcome(step: usize, group: usize, outcome: &RoutingOutcome) -> Self {
        Self {
            step,
            layer_or_group: group,
            expert_counts: outcome.per_expert_count.clone(),
            dropped: outcome.dropped(),
            balance_loss: balance_loss(outcome),
            tokens: outcome.num_tokens,
            assignments: outcome.assignments(),
            dispatch_fractions: outcome.dispatch_fractions(),
        }
    }

    pub fn drop_rate(&self) -> f64 {
        if self.assignments == 0 {
            0.0
        } else {
            self.dropped as f64 / self.assignments as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub records: Vec<RoutingRecord>,
}

/// One record per routing operation, in order; the position is the group.
pub fn routing_report(step: usize, outcomes: &[RoutingOutcome]) -> Result<RoutingReport> {
    if outcomes.is_empty() {
        return Err(Error::invalid("routing report needs at least one routing outcome"));
    }
    Ok(RoutingReport {
        records: outcomes
            .iter()
            .enumerate()
            .map(|(g, o)| RoutingRecord::from_outcome(step, g, o))
            .collect(),
    })
}

impl RoutingReport {
    pub fn drop_rates(&self) -> Vec<f64> {
        self.records.iter().map(RoutingRecord::drop_rate).collect()
    }

    /// Mean drop rate over all routing operations.
    pub fn mean_drop_rate(&self) -> f64 {
        let dropped: usize = self.records.iter().map(|r| r.dropped).sum();
        let total: usize = self.records.iter().map(|r| r.assignments).sum();
        if total == 0 {
            0.0
        } else {
            dropped as f64 / total as f64
        }
    }

    /// Merges per-group counts of another report (same group layout) into this one.
    pub fn accumulate(&mut self, other: &RoutingReport) {
        if self.records.is_empty() {
            self.records = other.records.clone();
            return;
        }
        for (a, b) in self.records.iter_mut().zip(&other.records) {
            let total = (a.tokens + b.tokens).max(1) as f64;
            for (fa, fb) in a.dispatch_fractions.iter_mut().zip(&b.dispatch_fractions) {
                *fa = (*fa * a.tokens as f64 + fb * b.tokens as f64) / total;
            }
            a.balance_loss = (a.balance_loss * a.tokens as f64 + b.balance_loss * b.tokens as f64) / total;
            for (ca, cb) in a.expert_counts.iter_mut().zip(&b.expert_counts) {
                *ca += cb;
            }
            a.dropped += b.dropped;
            a.tokens += b.tokens;
            a.assignments += b.assignments;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::dispatch_with_capacity;
    use crate::tensor::Tensor;

    fn collapsed(tokens: usize, k: usize, e: usize) -> RoutingOutcome {
        // every token prefers experts 0..k in order
        let row: Vec<f64> = (0..e).map(|i| -(i as f64)).collect();
        let rows: Vec<Vec<f64>> = (0..tokens).map(|_| row.clone()).collect();
        let probs = Tensor::matrix(&rows).unwrap().softmax(1).unwrap();
        RoutingOutcome::from_probs(&probs, k).unwrap()
    }

    #[test]
    fn no_drops_means_zero_rate() {
        let o = dispatch_with_capacity(&collapsed(4, 1, 2), 4);
        let r = routing_report(0, &[o]).unwrap();
        assert_eq!(r.records[0].drop_rate(), 0.0);
    }

    #[test]
    fn single_expert_with_half_buffer_drops_half() {
        // all K·T assignments on one expert (K = 1), B = K·T / 2
        let o = dispatch_with_capacity(&collapsed(8, 1, 4), 4);
        let r = routing_report(3, &[o]).unwrap();
        assert_eq!(r.records[0].drop_rate(), 0.5);
        assert_eq!(r.records[0].step, 3);
    }

    #[test]
    fn empty_list_errors() {
        assert!(routing_report(0, &[]).is_err());
    }
}
