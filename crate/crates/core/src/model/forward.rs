//! The full stack: embed → D blocks → final norm → head.
//!
//! Blocks are split into `G` contiguous groups of `D/G`. The first block of
//! a group routes; the rest reuse its indices, gates and kept flags while
//! feeding their own representations to the experts.

use super::config::EmbedConfig;
use super::embed::{add_positions, patch_embed, patch_matrix, prepend_class_token, token_embed_factorized};
use super::head::head_forward;
use super::layers::{block_forward, layer_norm, BlockContext, BlockVars, NormVars, Routing, TraceEvent};
use super::params::{EmbedIds, WideNet};
use crate::error::{Error, Result};
use crate::moe::{CombineWeights, MoeSettings, RoutingOutcome, RoutingPlan};
use crate::tensor::{RngStream, Tape, Var};

/// A batch of inputs matching the embed configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    /// `batch × seq_len` token ids, row-major.
    Tokens { ids: Vec<usize>, batch: usize },
    /// `batch` images of `channels × size × size` values each.
    Images { pixels: Vec<f64>, batch: usize },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Tokens { batch, .. } | Batch::Images { batch, .. } => *batch,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Routing noise and dropout on.
    pub training: bool,
    /// Record per-stage events and per-block routing decisions.
    pub trace: bool,
    pub combine: CombineWeights,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            training: true,
            ..Self::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

pub struct ForwardOutput {
    /// `N × classes`.
    pub logits: Var,
    /// One plan per routing operation (`G` of them), in group order. Empty
    /// without MoE.
    pub plans: Vec<RoutingPlan>,
    /// Blocks that executed a routing operation.
    pub routing_blocks: Vec<usize>,
    /// With tracing on: the outcome each block's MoE layer combined with.
    pub block_outcomes: Vec<Option<RoutingOutcome>>,
    pub trace: Vec<TraceEvent>,
}

impl ForwardOutput {
    pub fn outcomes(&self) -> Vec<&RoutingOutcome> {
        self.plans.iter().map(|p| &p.outcome).collect()
    }
}

impl WideNet {
    /// Records one forward pass on `tape`. When training, routing noise and
    /// dropout masks are drawn from `rng` in a fixed order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        opts: ForwardOptions,
        rng: &mut RngStream,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let n = batch.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let x = self.embed(tape, batch)?;
        let seq_len = cfg.seq_len();

        let per_group = cfg.blocks_per_group();
        let moe = MoeSettings {
            top_k: cfg.top_k,
            capacity_ratio: cfg.capacity_ratio,
            activation: cfg.activation,
            combine: opts.combine,
        };
        let mut plans: Vec<RoutingPlan> = Vec::new();
        let mut routing_blocks = Vec::new();
        let mut block_outcomes = Vec::new();
        let mut trace = Vec::new();
        let mut x = x;
        for (j, ids) in self.layout.blocks.iter().enumerate() {
            let vars = BlockVars::record(tape, &self.params, ids);
            // dropout masks come from a stream seeded off the main one so
            // the routing-noise draws stay in a fixed order
            let mut drop_rng;
            let dropout = if opts.training && cfg.dropout > 0.0 {
                drop_rng = RngStream::new(rng.next_u64());
                Some((cfg.dropout, &mut drop_rng))
            } else {
                None
            };
            let routing = if j % per_group == 0 || !cfg.use_moe {
                Routing::Compute(opts.training.then_some(&mut *rng))
            } else {
                Routing::Reuse(plans.last().ok_or_else(|| Error::invalid("group has no routing plan"))?)
            };
            let mut ctx = BlockContext {
                block: j,
                seq_len,
                heads: cfg.heads,
                ln_eps: cfg.ln_eps,
                moe,
                activation: cfg.activation,
                dropout,
                trace: opts.trace.then_some(&mut trace),
            };
            let out = block_forward(tape, x, &vars, routing, &mut ctx)?;
            x = out.x;
            if opts.trace {
                block_outcomes.push(out.plan.as_ref().map(|p| p.outcome.clone()));
            }
            if out.routed {
                routing_blocks.push(j);
                plans.push(out.plan.expect("routed blocks return their plan"));
            }
        }
        let final_norm = NormVars::record(tape, &self.params, &self.layout.final_norm);
        let h = layer_norm(tape, x, final_norm, cfg.ln_eps)?;
        let w = tape.param(&self.params, self.layout.classifier_w);
        let b = tape.param(&self.params, self.layout.classifier_b);
        let logits = head_forward(tape, h, cfg.head, n, cfg.has_class_token(), w, b)?;
        Ok(ForwardOutput {
            logits,
            plans,
            routing_blocks,
            block_outcomes,
            trace,
        })
    }

    /// Token representations entering block 0, `N·L × d_model`.
    pub fn embed(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let cfg = &self.cfg;
        let x = match (&cfg.embed, &self.layout.embed, batch) {
            (
                EmbedConfig::Patch {
                    image_size,
                    patch_size,
                    channels,
                },
                EmbedIds::Patch { proj_w, proj_b },
                Batch::Images { pixels, batch },
            ) => {
                let patches = patch_matrix(pixels, *batch, *channels, *image_size, *patch_size)?;
                let w = tape.param(&self.params, *proj_w);
                let b = tape.param(&self.params, *proj_b);
                patch_embed(tape, patches, w, b)?
            }
            (EmbedConfig::Token { max_len, .. }, EmbedIds::Token { table, proj }, Batch::Tokens { ids, batch }) => {
                if ids.len() != batch * max_len {
                    return Err(Error::invalid(format!(
                        "expected {batch} sequences of {max_len} tokens, got {} ids",
                        ids.len()
                    )));
                }
                let t = tape.param(&self.params, *table);
                let p = tape.param(&self.params, *proj);
                token_embed_factorized(tape, ids, t, p)?
            }
            _ => return Err(Error::invalid("batch kind does not match the embed configuration")),
        };
        let x = match self.layout.class_token {
            Some(id) => {
                let cls = tape.param(&self.params, id);
                prepend_class_token(tape, x, cls, batch.len())?
            }
            None => x,
        };
        let pos = tape.param(&self.params, self.layout.positions);
        add_positions(tape, x, pos)
    }
}
