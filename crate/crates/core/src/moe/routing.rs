use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Everything one routing operation decided for a batch of tokens.
///
/// Matrices are row-major with one row per token: `probs` and `gates` are
/// `T×E`, `indices` and `kept` are `T×K`. `indices` lists each token's
/// selected experts by descending probability.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingOutcome {
    pub num_tokens: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub probs: Vec<f64>,
    pub indices: Vec<usize>,
    pub gates: Vec<f64>,
    pub kept: Vec<bool>,
    /// Kept assignments per expert (equal to dispatched ones before
    /// [`dispatch_with_capacity`] runs).
    pub per_expert_count: Vec<usize>,
    /// Buffer capacity applied, if any.
    pub capacity: Option<usize>,
}

/// Indices of the `k` largest entries, largest first; equal values go to the
/// lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps ascending index order among ties
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    order.truncate(k);
    order
}

impl RoutingOutcome {
    /// Top-k selection over a `T×E` matrix of routing probabilities. Gate
    /// values are the selected probabilities, not renormalized.
    pub fn from_probs(probs: &Tensor, top_k: usize) -> Result<Self> {
        let (t, e) = probs.dims2("route")?;
        if top_k == 0 || top_k > e {
            return Err(Error::invalid(format!("top-k must be in 1..={e}, got {top_k}")));
        }
        let p = probs.data();
        let mut indices = Vec::with_capacity(t * top_k);
        let mut gates = vec![0.0; t * e];
        let mut counts = vec![0; e];
        for tok in 0..t {
            let row = &p[tok * e..(tok + 1) * e];
            for i in top_k_indices(row, top_k) {
                indices.push(i);
                gates[tok * e + i] = row[i];
                counts[i] += 1;
            }
        }
        Ok(Self {
            num_tokens: t,
            num_experts: e,
            top_k,
            probs: p.to_vec(),
            indices,
            gates,
            kept: vec![true; t * top_k],
            per_expert_count: counts,
            capacity: None,
        })
    }

    pub fn selected(&self, token: usize) -> &[usize] {
        &self.indices[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn kept_flags(&self, token: usize) -> &[bool] {
        &self.kept[token * self.top_k..(token + 1) * self.top_k]
    }

    pub fn assignments(&self) -> usize {
        self.num_tokens * self.top_k
    }

    pub fn dropped(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }

    pub fn drop_rate(&self) -> f64 {
        if self.assignments() == 0 {
            0.0
        } else {
            self.dropped() as f64 / self.assignments() as f64
        }
    }

    /// Assignments per expert before any capacity dropping.
    pub fn dispatch_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_experts];
        for &i in &self.indices {
            counts[i] += 1;
        }
        counts
    }

    /// `m_i`: fraction of tokens whose top-k includes expert `i`.
    pub fn dispatch_fractions(&self) -> Vec<f64> {
        let t = self.num_tokens.max(1) as f64;
        self.dispatch_counts().into_iter().map(|c| c as f64 / t).collect()
    }

    /// Token-mean of the routing probabilities, per expert.
    pub fn mean_probs(&self) -> Vec<f64> {
        let e = self.num_experts;
        let mut acc = vec![0.0; e];
        for row in self.probs.chunks(e) {
            acc.iter_mut().zip(row).for_each(|(a, p)| *a += p);
        }
        let t = self.num_tokens.max(1) as f64;
        acc.into_iter().map(|a| a / t).collect()
    }

    /// Tokens that keep an assignment to `expert`, ascending.
    pub fn kept_tokens(&self, expert: usize) -> Vec<usize> {
        (0..self.num_tokens)
            .filter(|&t| {
                self.selected(t)
                    .iter()
                    .zip(self.kept_flags(t))
                    .any(|(&i, &k)| k && i == expert)
            })
            .collect()
    }
}

/// Per-expert buffer `B = ⌈C·K·N·L / E⌉`.
///
/// Products that are integral up to rounding noise (1e-9 relative) are not
/// bumped to the next integer.
pub fn buffer_capacity(ratio: f64, top_k: usize, batch: usize, seq_len: usize, experts: usize) -> Result<usize> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::invalid(format!("capacity ratio must be > 0, got {ratio}")));
    }
    if top_k == 0 || batch == 0 || seq_len == 0 || experts == 0 {
        return Err(Error::invalid("capacity counts must all be >= 1"));
    }
    let raw = ratio * (top_k * batch * seq_len) as f64 / experts as f64;
    let nearest = raw.round();
    let b = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    Ok(b as usize)
}

/// Noisy top-k routing: `P = softmax(x·W_f + ε)` with `ε ~ N(0, 1/E²)` when
/// training and `ε = 0` otherwise, then top-k selection of `P`.
pub fn route(x: &Tensor, router: &Tensor, top_k: usize, rng: &mut RngStream, training: bool) -> Result<RoutingOutcome> {
    let mut logits = x.matmul(router)?;
    let (t, e) = logits.dims2("route")?;
    if top_k == 0 || top_k > e {
        return Err(Error::invalid(format!("top-k must be in 1..={e}, got {top_k}")));
    }
    if training {
        let noise = rng.sample_gaussian([t, e], 0.0, 1.0 / e as f64)?;
        logits = logits.add(&noise)?;
    }
    RoutingOutcome::from_probs(&logits.softmax(1)?, top_k)
}

/// Drops assignments beyond each expert's buffer. Tokens are scanned in
/// ascending flat order (batch-major, then position) and each token's
/// assignments in selection order; the first `capacity` assignments an
/// expert receives are kept.
pub fn dispatch_with_capacity(outcome: &RoutingOutcome, capacity: usize) -> RoutingOutcome {
    let mut out = outcome.clone();
    let mut counts = vec![0usize; out.num_experts];
    for slot in 0..out.indices.len() {
        let e = out.indices[slot];
        let keep = out.kept[slot] && counts[e] < capacity;
        if keep {
            counts[e] += 1;
        }
        out.kept[slot] = keep;
    }
    out.per_expert_count = counts;
    out.capacity = Some(capacity);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome_from_logits(rows: &[Vec<f64>], k: usize) -> RoutingOutcome {
        let logits = Tensor::matrix(rows).unwrap();
        RoutingOutcome::from_probs(&logits.softmax(1).unwrap(), k).unwrap()
    }

    #[test]
    fn symmetric_tie_goes_to_lower_index() {
        let o = outcome_from_logits(&[vec![0.0, 0.0]], 1);
        assert_eq!(o.probs, vec![0.5, 0.5]);
        assert_eq!(o.indices, vec![0]);
        assert_eq!(o.gates, vec![0.5, 0.0]);
    }

    #[test]
    fn worked_three_expert_case() {
        let o = outcome_from_logits(&[vec![1.0, 2.0, 0.0]], 2);
        assert_eq!(o.indices, vec![1, 0]);
        let expect = [0.24472847105479764, 0.6652409557748219, 0.0];
        for (g, e) in o.gates.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn k_above_e_errors() {
        let x = Tensor::zeros([2, 3]);
        let w = Tensor::zeros([3, 2]);
        assert!(route(&x, &w, 3, &mut RngStream::new(0), false).is_err());
    }

    #[test]
    fn capacity_worked_values() {
        assert_eq!(buffer_capacity(1.2, 2, 1, 8, 4).unwrap(), 5);
        assert_eq!(buffer_capacity(1.0, 2, 2, 4, 4).unwrap(), 4);
        // 1.1 * 10 is 11.000000000000002 in f64
        assert_eq!(buffer_capacity(1.1, 1, 1, 10, 1).unwrap(), 11);
        assert!(buffer_capacity(0.0, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn overflow_token_is_dropped() {
        let rows: Vec<Vec<f64>> = (0..6).map(|_| vec![5.0, 0.0]).collect();
        let o = dispatch_with_capacity(&outcome_from_logits(&rows, 1), 5);
        assert_eq!(o.kept, vec![true, true, true, true, true, false]);
        assert_eq!(o.per_expert_count, vec![5, 0]);
        assert_eq!(o.dropped(), 1);
    }

    #[test]
    fn ample_capacity_keeps_everything() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 0.5, -1.0]).collect();
        let o = dispatch_with_capacity(&outcome_from_logits(&rows, 2), 12);
        assert!(o.kept.iter().all(|&k| k));
        assert_eq!(o.per_expert_count, o.dispatch_counts());
    }

    #[test]
    fn eval_routing_has_no_noise() {
        let x = Tensor::new([2, 2], vec![0.3, -0.1, 1.0, 0.4]).unwrap();
        let w = Tensor::new([2, 3], vec![0.5, -0.2, 0.1, 0.0, 0.3, -0.4]).unwrap();
        let a = route(&x, &w, 2, &mut RngStream::new(1), false).unwrap();
        let b = route(&x, &w, 2, &mut RngStream::new(2), false).unwrap();
        assert_eq!(a, b);
        let c = route(&x, &w, 2, &mut RngStream::new(1), true).unwrap();
        assert_ne!(a.probs, c.probs);
    }
}
