//! Block-level layers on the tape: layer norm, multi-head attention, dropout
//! and the pre-norm block `LN → MHA → + → LN → MoE → +`.

use crate::error::{Error, Result};
use crate::moe::{combine, feed_forward, route_on_tape, Activation, ExpertVars, MoeSettings, RoutingPlan};
use crate::tensor::{ParamStore, RngStream, Tape, Tensor, Var};

use super::params::{AttentionIds, BlockIds, ExpertIds, FeedForwardIds, NormIds};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeedForwardVars {
    Moe { router: Var, experts: Vec<ExpertVars> },
    Dense(ExpertVars),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockVars {
    pub attn: AttentionVars,
    pub ffn: FeedForwardVars,
    pub att_norm: NormVars,
    pub moe_norm: NormVars,
}

fn expert_vars(tape: &mut Tape, store: &ParamStore, ids: &ExpertIds) -> ExpertVars {
    ExpertVars {
        w1: tape.param(store, ids.w1),
        b1: tape.param(store, ids.b1),
        w2: tape.param(store, ids.w2),
        b2: tape.param(store, ids.b2),
    }
}

impl NormVars {
    pub fn record(tape: &mut Tape, store: &ParamStore, ids: &NormIds) -> Self {
        Self {
            gamma: tape.param(store, ids.gamma),
            beta: tape.param(store, ids.beta),
        }
    }
}

impl AttentionVars {
    pub fn record(tape: &mut Tape, store: &ParamStore, ids: &AttentionIds) -> Self {
        Self {
            wq: tape.param(store, ids.wq),
            bq: tape.param(store, ids.bq),
            wk: tape.param(store, ids.wk),
            bk: tape.param(store, ids.bk),
            wv: tape.param(store, ids.wv),
            bv: tape.param(store, ids.bv),
            wo: tape.param(store, ids.wo),
            bo: tape.param(store, ids.bo),
        }
    }
}

impl BlockVars {
    /// Records a block's parameters. Shared ids resolve to the same `Var`.
    pub fn record(tape: &mut Tape, store: &ParamStore, ids: &BlockIds) -> Self {
        let ffn = match &ids.ffn {
            FeedForwardIds::Moe { router, experts } => FeedForwardVars::Moe {
                router: tape.param(store, *router),
                experts: experts.iter().map(|e| expert_vars(tape, store, e)).collect(),
            },
            FeedForwardIds::Dense(e) => FeedForwardVars::Dense(expert_vars(tape, store, e)),
        };
        Self {
            attn: AttentionVars::record(tape, store, &ids.attn),
            ffn,
            att_norm: NormVars::record(tape, store, &ids.att_norm),
            moe_norm: NormVars::record(tape, store, &ids.moe_norm),
        }
    }
}

pub fn layer_norm(tape: &mut Tape, x: Var, norm: NormVars, eps: f64) -> Result<Var> {
    tape.layer_norm(x, norm.gamma, norm.beta, eps)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head self-attention over `x (N·L × d)`; tokens attend within their
/// own length-`seq_len` sequence.
pub fn mha_forward(tape: &mut Tape, x: Var, attn: &AttentionVars, seq_len: usize, heads: usize) -> Result<Var> {
    let q = linear(tape, x, attn.wq, attn.bq)?;
    let k = linear(tape, x, attn.wk, attn.bk)?;
    let v = linear(tape, x, attn.wv, attn.bv)?;
    let ctx = tape.attention(q, k, v, seq_len, heads)?;
    linear(tape, ctx, attn.wo, attn.bo)
}

/// Inverted dropout with a constant mask drawn from `rng`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut RngStream) -> Result<Var> {
    if rate == 0.0 {
        return Ok(x);
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..n)
        .map(|_| if rng.next_uniform() < rate { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

/// Stages of one block, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    AttentionNorm,
    Attention,
    AttentionResidual,
    MoeNorm,
    FeedForward,
    FeedForwardResidual,
}

/// One instrumented stage: which block ran it, and which tape nodes it used
/// as parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub block: usize,
    pub stage: Stage,
    pub params: Vec<Var>,
}

/// How the MoE layer of a block gets its routing decision.
pub enum Routing<'a> {
    /// Route here; `Some` adds training noise drawn from the stream.
    Compute(Option<&'a mut RngStream>),
    /// Reuse the decision of the group's first block.
    Reuse(&'a RoutingPlan),
}

/// Per-call knobs for [`block_forward`].
pub struct BlockContext<'a> {
    pub block: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub ln_eps: f64,
    pub moe: MoeSettings,
    pub activation: Activation,
    /// Dropout rate and mask stream; `None` disables dropout.
    pub dropout: Option<(f64, &'a mut RngStream)>,
    pub trace: Option<&'a mut Vec<TraceEvent>>,
}

impl BlockContext<'_> {
    fn record(&mut self, stage: Stage, params: Vec<Var>) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.push(TraceEvent {
                block: self.block,
                stage,
                params,
            });
        }
    }

    fn drop(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.dropout.as_mut() {
            Some((rate, rng)) => dropout(tape, x, *rate, rng),
            None => Ok(x),
        }
    }
}

/// Output of one block and, when this block routed, its fresh plan. The plan
/// actually used by the MoE layer is returned in both cases.
pub struct BlockOutput {
    pub x: Var,
    pub routed: bool,
    pub plan: Option<RoutingPlan>,
}

/// `x' = LN_att(x); x ← MHA(x') + x; x'' = LN_moe(x); x ← MoE(x'') + x`.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    vars: &BlockVars,
    routing: Routing<'_>,
    ctx: &mut BlockContext<'_>,
) -> Result<BlockOutput> {
    let n = vars.att_norm;
    let h = layer_norm(tape, x, n, ctx.ln_eps)?;
    ctx.record(Stage::AttentionNorm, vec![n.gamma, n.beta]);
    let a = mha_forward(tape, h, &vars.attn, ctx.seq_len, ctx.heads)?;
    let at = &vars.attn;
    ctx.record(
        Stage::Attention,
        vec![at.wq, at.bq, at.wk, at.bk, at.wv, at.bv, at.wo, at.bo],
    );
    let a = ctx.drop(tape, a)?;
    let x = tape.add(a, x)?;
    ctx.record(Stage::AttentionResidual, vec![]);

    let n = vars.moe_norm;
    let h = layer_norm(tape, x, n, ctx.ln_eps)?;
    ctx.record(Stage::MoeNorm, vec![n.gamma, n.beta]);
    let (f, routed, plan) = match &vars.ffn {
        FeedForwardVars::Moe { router, experts } => {
            let (plan, routed) = match routing {
                Routing::Compute(noise) => (route_on_tape(tape, h, *router, &ctx.moe, noise)?, true),
                Routing::Reuse(p) => (p.clone(), false),
            };
            let y = combine(tape, h, experts, &plan, &ctx.moe)?;
            let mut used = vec![*router];
            used.extend(experts.iter().flat_map(|e| [e.w1, e.b1, e.w2, e.b2]));
            ctx.record(Stage::FeedForward, used);
            (y, routed, Some(plan))
        }
        FeedForwardVars::Dense(e) => {
            let y = feed_forward(tape, h, e, ctx.activation)?;
            ctx.record(Stage::FeedForward, vec![e.w1, e.b1, e.w2, e.b2]);
            (y, false, None)
        }
    };
    let f = ctx.drop(tape, f)?;
    let x = tape.add(f, x)?;
    ctx.record(Stage::FeedForwardResidual, vec![]);
    Ok(BlockOutput { x, routed, plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2], vec![1.0, 3.0]).unwrap());
        let n = NormVars {
            gamma: tape.constant(Tensor::full([2], 1.0)),
            beta: tape.constant(Tensor::zeros([2])),
        };
        let y = layer_norm(&mut tape, x, n, 1e-12).unwrap();
        let y = tape.value(y).data();
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_row_normalizes_to_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4], 2.5));
        let n = NormVars {
            gamma: tape.constant(Tensor::full([4], 1.0)),
            beta: tape.constant(Tensor::zeros([4])),
        };
        let y = layer_norm(&mut tape, x, n, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_mask_keeps_expectation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([100, 10], 1.0));
        let mut rng = RngStream::new(3);
        assert_eq!(dropout(&mut tape, x, 0.0, &mut rng).unwrap(), x);
        let y = dropout(&mut tape, x, 0.5, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "{mean}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
