//! Randomized invariant checks and brute-force oracles shared by the
//! verification battery and the test suites.

use crate::analysis::{ln_divergence, ln_divergence_brute, model_ln_divergence, NormSite};
use crate::error::Result;
use crate::model::{Batch, EmbedConfig, ForwardOptions, HeadType, WideNet, WideNetConfig};
use crate::moe::{
    buffer_capacity, combine, dispatch_with_capacity, route, Activation, CombineWeights, ExpertParams, MoeSettings,
    RoutingOutcome,
};
use crate::tensor::{RngStream, Tape, Tensor};
use crate::train::mix;

/// Violations found over random routing instances, by kind.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingViolations {
    pub instances: usize,
    /// A token without exactly `K` distinct selections before capacity.
    pub selection_count: usize,
    /// Gate nonzeros outside the selection, or more than `K` of them.
    pub sparsity: usize,
    /// A selected probability below an unselected one.
    pub dominance: usize,
    /// Equal probabilities resolved toward the higher index.
    pub ties: usize,
    /// An expert keeping more than `B`, or more than `K·T` kept in total.
    pub capacity: usize,
    /// Rows of `P` not summing to 1 within 1e-9.
    pub normalization: usize,
}

impl RoutingViolations {
    pub fn total(&self) -> usize {
        self.selection_count + self.sparsity + self.dominance + self.ties + self.capacity + self.normalization
    }
}

/// Routes `instances` random batches (random `T, E, K, C`, some with tied
/// logits) and counts invariant violations.
pub fn routing_invariants(instances: usize, seed: u64) -> Result<RoutingViolations> {
    let mut v = RoutingViolations {
        instances,
        ..Default::default()
    };
    for inst in 0..instances {
        let mut rng = RngStream::new(mix(&[seed, 0x726f_7574, inst as u64]));
        let e = 1 + rng.next_index(6);
        let k = 1 + rng.next_index(e);
        let t = 1 + rng.next_index(16);
        let d = 1 + rng.next_index(4);
        let ratio = 0.5 + 1.5 * rng.next_uniform();
        // every third instance uses integer-valued inputs so ties are common
        let quantized = inst % 3 == 0;
        let draw = |rng: &mut RngStream| {
            let g = rng.next_gaussian();
            if quantized {
                g.round()
            } else {
                g
            }
        };
        let x = Tensor::new([t, d], (0..t * d).map(|_| draw(&mut rng)).collect())?;
        let w = Tensor::new([d, e], (0..d * e).map(|_| draw(&mut rng)).collect())?;
        let training = rng.next_index(2) == 1 && !quantized;
        let pre = route(&x, &w, k, &mut rng, training)?;
        let b = buffer_capacity(ratio, k, 1, t, e)?;
        let post = dispatch_with_capacity(&pre, b);
        check_outcome(&pre, &post, b, &mut v);
    }
    Ok(v)
}

fn check_outcome(pre: &RoutingOutcome, post: &RoutingOutcome, b: usize, v: &mut RoutingViolations) {
    let (e, k) = (pre.num_experts, pre.top_k);
    for tok in 0..pre.num_tokens {
        let row = &pre.probs[tok * e..(tok + 1) * e];
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            v.normalization += 1;
        }
        let sel = pre.selected(tok);
        let mut uniq = sel.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        if sel.len() != k || uniq.len() != k || pre.kept_flags(tok).iter().any(|&f| !f) {
            v.selection_count += 1;
        }
        let gates = &pre.gates[tok * e..(tok + 1) * e];
        let nonzero: Vec<usize> = (0..e).filter(|&i| gates[i] != 0.0).collect();
        if nonzero.len() > k || nonzero.iter().any(|i| !sel.contains(i)) || sel.iter().any(|&i| gates[i] != row[i]) {
            v.sparsity += 1;
        }
        let unselected: Vec<usize> = (0..e).filter(|i| !sel.contains(i)).collect();
        let min_sel = sel.iter().map(|&i| row[i]).fold(f64::INFINITY, f64::min);
        let max_un = unselected.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
        if min_sel < max_un {
            v.dominance += 1;
        }
        if sel.iter().any(|&i| unselected.iter().any(|&j| row[i] == row[j] && i > j)) {
            v.ties += 1;
        }
    }
    let kept: usize = post.kept.iter().filter(|&&f| f).count();
    let mut counts = vec![0; e];
    for (slot, &f) in post.kept.iter().enumerate() {
        if f {
            counts[post.indices[slot]] += 1;
        }
    }
    if counts.iter().any(|&c| c > b) || counts != post.per_expert_count || kept > k * pre.num_tokens {
        v.capacity += 1;
    }
}

fn gelu_ref(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Plain-loop expert network.
fn expert_ref(e: &ExpertParams, x: &[f64], act: Activation) -> Vec<f64> {
    let (d, f) = (e.w1.shape()[0], e.w1.shape()[1]);
    let (w1, b1, w2, b2) = (e.w1.data(), e.b1.data(), e.w2.data(), e.b2.data());
    let hidden: Vec<f64> = (0..f)
        .map(|j| {
            let z = b1[j] + (0..d).map(|i| x[i] * w1[i * f + j]).sum::<f64>();
            match act {
                Activation::Gelu => gelu_ref(z),
                Activation::Relu => z.max(0.0),
            }
        })
        .collect();
    (0..d)
        .map(|o| b2[o] + (0..f).map(|j| hidden[j] * w2[j * d + o]).sum::<f64>())
        .collect()
}

/// Largest deviation between the tape combine (with `weights`) and a dense
/// loop over every `(token, expert)` pair that honors kept flags and uses
/// the raw gate values, over `trials` random instances with some drops.
pub fn combine_oracle_error(weights: CombineWeights, trials: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = RngStream::new(mix(&[seed, 0x636f_6d62, trial as u64]));
        let (t, d, f) = (3 + rng.next_index(8), 2 + rng.next_index(4), 2 + rng.next_index(5));
        let e = 2 + rng.next_index(4);
        let k = 1 + rng.next_index(e);
        let act = if rng.next_index(2) == 0 { Activation::Gelu } else { Activation::Relu };
        let x = rng.sample_gaussian([t, d], 0.0, 1.0)?;
        let router = rng.sample_gaussian([d, e], 0.0, 1.0)?;
        let experts: Vec<ExpertParams> = (0..e)
            .map(|_| -> Result<ExpertParams> {
                Ok(ExpertParams {
                    w1: rng.sample_gaussian([d, f], 0.0, 0.5)?,
                    b1: rng.sample_gaussian([f], 0.0, 0.5)?,
                    w2: rng.sample_gaussian([f, d], 0.0, 0.5)?,
                    b2: rng.sample_gaussian([d], 0.0, 0.5)?,
                })
            })
            .collect::<Result<_>>()?;
        // a tight ratio so some assignments drop
        let settings = MoeSettings {
            top_k: k,
            capacity_ratio: 0.75,
            activation: act,
            combine: weights,
        };
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let rv = tape.constant(router);
        let plan = crate::moe::route_on_tape(&mut tape, xv, rv, &settings, None)?;
        let ev: Vec<_> = experts.iter().map(|p| p.record(&mut tape)).collect();
        let y = combine(&mut tape, xv, &ev, &plan, &settings)?;
        let y = tape.value(y).data().to_vec();

        let o = &plan.outcome;
        for tok in 0..t {
            let xt = &x.data()[tok * d..(tok + 1) * d];
            let mut want = vec![0.0; d];
            for ex in 0..e {
                let kept = o
                    .selected(tok)
                    .iter()
                    .zip(o.kept_flags(tok))
                    .any(|(&i, &kf)| i == ex && kf);
                if !kept {
                    continue;
                }
                let g = o.gates[tok * e + ex];
                for (w, v) in want.iter_mut().zip(expert_ref(&experts[ex], xt, act)) {
                    *w += g * v;
                }
            }
            for (a, b) in y[tok * d..(tok + 1) * d].iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Counts group-routing violations for a depth-4 model with `groups`
/// groups: wrong number of routing operations, routing in the wrong block,
/// or a block whose (indices, kept) differ from its group's first block.
pub fn group_routing_violations(groups: usize, seed: u64) -> Result<usize> {
    let cfg = WideNetConfig {
        depth: 4,
        d_model: 16,
        d_ff: 16,
        heads: 2,
        groups,
        embed: EmbedConfig::Token {
            vocab: 10,
            embed_dim: 8,
            max_len: 6,
        },
        head: HeadType::GlobalAvgPool,
        ..WideNetConfig::default()
    };
    let model = WideNet::new(cfg.clone(), seed)?;
    let mut rng = RngStream::new(mix(&[seed, 0x6772_6f75]));
    let batch = Batch::Tokens {
        ids: (0..3 * 6).map(|_| rng.next_index(10)).collect(),
        batch: 3,
    };
    let opts = ForwardOptions {
        training: true,
        trace: true,
        combine: CombineWeights::Raw,
    };
    let mut tape = Tape::no_grad();
    let out = model.forward(&mut tape, &batch, opts, &mut rng)?;
    let per = cfg.depth / groups;
    let mut violations = 0;
    if out.plans.len() != groups {
        violations += 1;
    }
    let expect: Vec<usize> = (0..groups).map(|g| g * per).collect();
    if out.routing_blocks != expect {
        violations += 1;
    }
    for (j, o) in out.block_outcomes.iter().enumerate() {
        let (Some(o), Some(first)) = (o, out.plans.get(j / per).map(|p| &p.outcome)) else {
            violations += 1;
            continue;
        };
        for tok in 0..o.num_tokens {
            if o.selected(tok) != first.selected(tok) || o.kept_flags(tok) != first.kept_flags(tok) {
                violations += 1;
            }
        }
    }
    Ok(violations)
}

/// Largest `|fast − brute|` for the divergence metric over random inputs
/// with `2 ≤ N ≤ 6` blocks and `1 ≤ M ≤ 16` elements.
pub fn ln_divergence_oracle_error(trials: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = RngStream::new(mix(&[seed, 0x6c6e_6469, trial as u64]));
        let n = 2 + rng.next_index(5);
        let m = 1 + rng.next_index(16);
        let vectors: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| 1.0 + 0.3 * rng.next_gaussian()).collect())
            .collect();
        let (fast, _) = ln_divergence(&vectors)?;
        worst = worst.max((fast - ln_divergence_brute(&vectors)?).abs());
    }
    Ok(worst)
}

/// `y_γ`, `y_β` of a trained-looking (randomly perturbed) shared-LN model.
pub fn shared_ln_divergence(seed: u64) -> Result<(f64, f64)> {
    let cfg = WideNetConfig {
        share_ln: true,
        ..WideNetConfig::default()
    };
    let mut model = WideNet::new(cfg, seed)?;
    let mut rng = RngStream::new(seed);
    for n in model.block_norms(false) {
        for id in [n.gamma, n.beta] {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v += rng.next_gaussian();
            }
        }
    }
    let r = model_ln_divergence(&model, NormSite::Moe)?;
    Ok((r.y_gamma, r.y_beta))
}

/// A random valid configuration for accounting checks.
pub fn random_config(rng: &mut RngStream) -> WideNetConfig {
    let heads = 1 + rng.next_index(3);
    let depth = 1 + rng.next_index(5);
    let divisors: Vec<usize> = (1..=depth).filter(|g| depth % g == 0).collect();
    let num_experts = 1 + rng.next_index(5);
    let head = if rng.next_index(2) == 0 {
        HeadType::TokenCls
    } else {
        HeadType::GlobalAvgPool
    };
    let embed = if rng.next_index(2) == 0 {
        EmbedConfig::Patch {
            image_size: 8,
            patch_size: [2, 4, 8][rng.next_index(3)],
            channels: 1 + rng.next_index(3),
        }
    } else {
        EmbedConfig::Token {
            vocab: 5 + rng.next_index(30),
            embed_dim: 1 + rng.next_index(8),
            max_len: 1 + rng.next_index(8),
        }
    };
    WideNetConfig {
        depth,
        d_model: heads * (1 + rng.next_index(6)),
        d_ff: 1 + rng.next_index(20),
        heads,
        num_experts,
        top_k: 1 + rng.next_index(num_experts),
        groups: divisors[rng.next_index(divisors.len())],
        share_attn: rng.next_index(2) == 1,
        share_moe: rng.next_index(2) == 1,
        share_ln: rng.next_index(2) == 1,
        use_moe: rng.next_index(4) != 0,
        head,
        embed,
        num_classes: 2 + rng.next_index(5),
        ..WideNetConfig::default()
    }
}

/// Configs (out of `trials`) whose closed-form count differs from the
/// number of stored parameter values.
pub fn parameter_count_mismatches(trials: usize, seed: u64) -> Result<Vec<WideNetConfig>> {
    let mut rng = RngStream::new(mix(&[seed, 0x7061_7261]));
    let mut bad = Vec::new();
    for _ in 0..trials {
        let cfg = random_config(&mut rng);
        let model = WideNet::new(cfg.clone(), 0)?;
        if model.count_parameters() != cfg.parameter_count() {
            bad.push(cfg);
        }
    }
    Ok(bad)
}
