//! The mixture-of-experts layer on the tape: `y_t = Σ_{i kept for t} g_i(x_t) · e_i(x_t)`.

use serde::{Deserialize, Serialize};

use super::routing::{buffer_capacity, dispatch_with_capacity, RoutingOutcome};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// How gate values weight expert outputs in the combine.
///
/// `Raw` is the only correct mode. `Renormalized` divides each token's kept
/// gates by their sum and exists so the verification battery can show its
/// combine oracle catches the difference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CombineWeights {
    #[default]
    Raw,
    Renormalized,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoeSettings {
    pub top_k: usize,
    pub capacity_ratio: f64,
    pub activation: Activation,
    pub combine: CombineWeights,
}

/// Router weight `W_f (d_model × E)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    pub w: Tensor,
}

/// One expert feed-forward network `W2·act(W1·x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ExpertParams {
    pub fn record(&self, tape: &mut Tape) -> ExpertVars {
        ExpertVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }
}

/// A routing decision with the probability node it came from, so blocks that
/// reuse it can still backpropagate into the router through the gates.
#[derive(Clone, Debug)]
pub struct RoutingPlan {
    pub outcome: RoutingOutcome,
    pub probs: Var,
}

pub fn feed_forward(tape: &mut Tape, x: Var, expert: &ExpertVars, activation: Activation) -> Result<Var> {
    let h = tape.matmul(x, expert.w1)?;
    let h = tape.add_row(h, expert.b1)?;
    let h = match activation {
        Activation::Gelu => tape.gelu(h)?,
        Activation::Relu => tape.relu(h)?,
    };
    let y = tape.matmul(h, expert.w2)?;
    tape.add_row(y, expert.b2)
}

/// Routes the rows of `x (T×d)` and applies the per-expert buffer
/// `⌈C·K·T/E⌉`. Noise is added iff `noise` is given.
pub fn route_on_tape(
    tape: &mut Tape,
    x: Var,
    router: Var,
    settings: &MoeSettings,
    noise: Option<&mut RngStream>,
) -> Result<RoutingPlan> {
    let mut logits = tape.matmul(x, router)?;
    let (t, e) = tape.value(logits).dims2("route")?;
    if settings.top_k == 0 || settings.top_k > e {
        return Err(Error::invalid(format!("top-k must be in 1..={e}, got {}", settings.top_k)));
    }
    if let Some(rng) = noise {
        let eps = rng.sample_gaussian([t, e], 0.0, 1.0 / e as f64)?;
        let eps = tape.constant(eps);
        logits = tape.add(logits, eps)?;
    }
    let probs = tape.softmax(logits, 1)?;
    let selected = RoutingOutcome::from_probs(tape.value(probs), settings.top_k)?;
    let capacity = buffer_capacity(settings.capacity_ratio, settings.top_k, 1, t, e)?;
    Ok(RoutingPlan {
        outcome: dispatch_with_capacity(&selected, capacity),
        probs,
    })
}

/// Weighted combine of expert outputs for the kept assignments of `plan`.
/// Tokens with every assignment dropped get a zero row.
pub fn combine(
    tape: &mut Tape,
    x: Var,
    experts: &[ExpertVars],
    plan: &RoutingPlan,
    settings: &MoeSettings,
) -> Result<Var> {
    let (t, d) = tape.value(x).dims2("moe")?;
    let o = &plan.outcome;
    if o.num_tokens != t {
        return Err(Error::ShapeMismatch {
            op: "moe combine",
            left: vec![t, d],
            right: vec![o.num_tokens, o.num_experts],
        });
    }
    if experts.len() != o.num_experts {
        return Err(Error::invalid(format!(
            "{} experts for a router over {}",
            experts.len(),
            o.num_experts
        )));
    }
    let e_count = o.num_experts;
    let mut y: Option<Var> = None;
    for (e, expert) in experts.iter().enumerate() {
        let rows = o.kept_tokens(e);
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &rows)?;
        let out = feed_forward(tape, xe, expert, settings.activation)?;
        let weights = match settings.combine {
            CombineWeights::Raw => {
                let flat: Vec<usize> = rows.iter().map(|&r| r * e_count + e).collect();
                tape.gather_elems(plan.probs, &flat)?
            }
            CombineWeights::Renormalized => {
                let w = rows.iter().map(|&r| o.gates[r * e_count + e] / kept_gate_mass(o, r)).collect();
                tape.constant(Tensor::vector(w)?)
            }
        };
        let weighted = tape.mul_rows(out, weights)?;
        let placed = tape.scatter_rows(weighted, &rows, t)?;
        y = Some(match y {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
    }
    Ok(match y {
        Some(v) => v,
        None => tape.constant(Tensor::zeros([t, d])),
    })
}

fn kept_gate_mass(o: &RoutingOutcome, token: usize) -> f64 {
    o.selected(token)
        .iter()
        .zip(o.kept_flags(token))
        .filter(|(_, &k)| k)
        .map(|(&i, _)| o.gates[token * o.num_experts + i])
        .sum()
}

/// Route then combine.
pub fn moe_forward(
    tape: &mut Tape,
    x: Var,
    router: Var,
    experts: &[ExpertVars],
    settings: &MoeSettings,
    noise: Option<&mut RngStream>,
) -> Result<(Var, RoutingPlan)> {
    let plan = route_on_tape(tape, x, router, settings, noise)?;
    let y = combine(tape, x, experts, &plan, settings)?;
    Ok((y, plan))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_expert(d: usize) -> ExpertParams {
        // relu(x) - relu(-x) = x: W1 = [I, -I], W2 = [I; -I]
        let mut w1 = vec![0.0; d * 2 * d];
        let mut w2 = vec![0.0; 2 * d * d];
        for i in 0..d {
            w1[i * 2 * d + i] = 1.0;
            w1[i * 2 * d + d + i] = -1.0;
            w2[i * d + i] = 1.0;
            w2[(d + i) * d + i] = -1.0;
        }
        ExpertParams {
            w1: Tensor::new([d, 2 * d], w1).unwrap(),
            b1: Tensor::zeros([2 * d]),
            w2: Tensor::new([2 * d, d], w2).unwrap(),
            b2: Tensor::zeros([d]),
        }
    }

    #[test]
    fn uniform_gates_over_identity_experts_reproduce_input() {
        let (d, e) = (3, 4);
        let x = Tensor::new([2, d], vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        // zero router: uniform 1/E probabilities
        let router = tape.constant(Tensor::zeros([d, e]));
        let experts: Vec<_> = (0..e).map(|_| identity_expert(d).record(&mut tape)).collect();
        let settings = MoeSettings {
            top_k: e,
            capacity_ratio: 100.0,
            activation: Activation::Relu,
            combine: CombineWeights::Raw,
        };
        let (y, _) = moe_forward(&mut tape, xv, router, &experts, &settings, None).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_dropped_token_gets_zero_row() {
        let d = 2;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new([3, d], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap());
        let probs = tape.constant(Tensor::new([3, 1], vec![1.0; 3]).unwrap());
        let outcome = RoutingOutcome::from_probs(tape.value(probs), 1).unwrap();
        let plan = RoutingPlan {
            outcome: dispatch_with_capacity(&outcome, 2),
            probs,
        };
        let experts = vec![identity_expert(d).record(&mut tape)];
        let settings = MoeSettings {
            top_k: 1,
            capacity_ratio: 1.0,
            activation: Activation::Relu,
            combine: CombineWeights::Raw,
        };
        let y = combine(&mut tape, xv, &experts, &plan, &settings).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }
}
