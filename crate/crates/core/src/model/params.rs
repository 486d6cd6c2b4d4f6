//! Parameter layout and initialization.
//!
//! Every block gets a [`BlockIds`]. With a sharing flag set, all blocks hold
//! the same ids for that component, so the tape sees one node and the
//! gradient from every block lands in one buffer.

use super::config::{EmbedConfig, WideNetConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, RngStream, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionIds {
    pub fn all(&self) -> [ParamId; 8] {
        [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertIds {
    pub fn all(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeedForwardIds {
    Moe { router: ParamId, experts: Vec<ExpertIds> },
    Dense(ExpertIds),
}

impl FeedForwardIds {
    pub fn all(&self) -> Vec<ParamId> {
        match self {
            FeedForwardIds::Moe { router, experts } => std::iter::once(*router)
                .chain(experts.iter().flat_map(ExpertIds::all))
                .collect(),
            FeedForwardIds::Dense(e) => e.all().to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Parameters referenced by block `j`: the attention and FFN weights (shared
/// or not) and its two layer norms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub attn: AttentionIds,
    pub ffn: FeedForwardIds,
    pub att_norm: NormIds,
    pub moe_norm: NormIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedIds {
    Patch { proj_w: ParamId, proj_b: ParamId },
    Token { table: ParamId, proj: ParamId },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelLayout {
    pub embed: EmbedIds,
    pub positions: ParamId,
    pub class_token: Option<ParamId>,
    pub blocks: Vec<BlockIds>,
    pub final_norm: NormIds,
    pub classifier_w: ParamId,
    pub classifier_b: ParamId,
}

/// A WideNet: configuration, parameter store and layout.
#[derive(Clone, Debug)]
pub struct WideNet {
    pub(crate) cfg: WideNetConfig,
    pub(crate) params: ParamStore,
    pub(crate) layout: ModelLayout,
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut RngStream,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.next_truncated_normal(std)).collect();
        self.store.add(name, Tensor::new(shape, data)?)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, value))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gamma: self.constant(format!("{prefix}.gamma"), vec![d], 1.0)?,
            beta: self.constant(format!("{prefix}.beta"), vec![d], 0.0)?,
        })
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.normal(format!("{prefix}.w"), vec![fan_in, fan_out], INIT_STD)?,
            self.constant(format!("{prefix}.b"), vec![fan_out], 0.0)?,
        ))
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<AttentionIds> {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), d, d)?;
        let (wk, bk) = self.linear(&format!("{prefix}.k"), d, d)?;
        let (wv, bv) = self.linear(&format!("{prefix}.v"), d, d)?;
        let (wo, bo) = self.linear(&format!("{prefix}.o"), d, d)?;
        Ok(AttentionIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    fn expert(&mut self, prefix: &str, d: usize, d_ff: usize) -> Result<ExpertIds> {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), d, d_ff)?;
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), d_ff, d)?;
        Ok(ExpertIds { w1, b1, w2, b2 })
    }

    fn ffn(&mut self, prefix: &str, cfg: &WideNetConfig) -> Result<FeedForwardIds> {
        let d = cfg.d_model;
        if cfg.use_moe {
            let router = self.normal(
                format!("{prefix}.router"),
                vec![d, cfg.num_experts],
                INIT_STD / (d as f64).sqrt(),
            )?;
            let experts = (0..cfg.num_experts)
                .map(|e| self.expert(&format!("{prefix}.experts.{e}"), d, cfg.d_ff))
                .collect::<Result<_>>()?;
            Ok(FeedForwardIds::Moe { router, experts })
        } else {
            Ok(FeedForwardIds::Dense(self.expert(&format!("{prefix}.ffn"), d, cfg.d_ff)?))
        }
    }
}

fn prefix(shared: bool, block: usize, part: &str) -> String {
    if shared {
        format!("shared.{part}")
    } else {
        format!("blocks.{block}.{part}")
    }
}

impl WideNet {
    /// Builds and initializes a model: truncated normal (std 0.02) for
    /// matrices and embeddings, std `0.02/√d_model` for the router, zeros for
    /// biases and β, ones for γ.
    pub fn new(cfg: WideNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let d = cfg.d_model;

        let embed = match cfg.embed {
            EmbedConfig::Patch {
                patch_size, channels, ..
            } => {
                let (proj_w, proj_b) = init.linear("embed.patch", patch_size * patch_size * channels, d)?;
                EmbedIds::Patch { proj_w, proj_b }
            }
            EmbedConfig::Token { vocab, embed_dim, .. } => EmbedIds::Token {
                table: init.normal("embed.table".into(), vec![vocab, embed_dim], INIT_STD)?,
                proj: init.normal("embed.proj".into(), vec![embed_dim, d], INIT_STD)?,
            },
        };
        let positions = init.normal("embed.positions".into(), vec![cfg.seq_len(), d], INIT_STD)?;
        let class_token = if cfg.has_class_token() {
            Some(init.normal("embed.class_token".into(), vec![1, d], INIT_STD)?)
        } else {
            None
        };

        let mut blocks: Vec<BlockIds> = Vec::with_capacity(cfg.depth);
        for j in 0..cfg.depth {
            let first = blocks.first();
            let att_norm = match first {
                Some(b) if cfg.share_ln => b.att_norm,
                _ => init.norm(&prefix(cfg.share_ln, j, "ln_att"), d)?,
            };
            let attn = match first {
                Some(b) if cfg.share_attn => b.attn,
                _ => init.attention(&prefix(cfg.share_attn, j, "attn"), d)?,
            };
            let moe_norm = match first {
                Some(b) if cfg.share_ln => b.moe_norm,
                _ => init.norm(&prefix(cfg.share_ln, j, "ln_moe"), d)?,
            };
            let ffn = match first {
                Some(b) if cfg.share_moe => b.ffn.clone(),
                _ => init.ffn(&prefix(cfg.share_moe, j, "moe"), &cfg)?,
            };
            blocks.push(BlockIds {
                attn,
                ffn,
                att_norm,
                moe_norm,
            });
        }
        let final_norm = init.norm("final_norm", d)?;
        let (classifier_w, classifier_b) = init.linear("head", d, cfg.num_classes)?;

        Ok(Self {
            params: init.store,
            layout: ModelLayout {
                embed,
                positions,
                class_token,
                blocks,
                final_norm,
                classifier_w,
                classifier_b,
            },
            cfg,
        })
    }

    pub fn config(&self) -> &WideNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    /// Exact count over distinct stored parameters; equal to
    /// [`WideNetConfig::parameter_count`].
    pub fn count_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Per-block γ/β of the pre-attention (`attention_site`) or pre-MoE norm.
    pub fn block_norms(&self, attention_site: bool) -> Vec<NormIds> {
        self.layout
            .blocks
            .iter()
            .map(|b| if attention_site { b.att_norm } else { b.moe_norm })
            .collect()
    }

    /// Copies values for every parameter name present in `other`; shapes must
    /// agree. Names missing from `other` are left untouched.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (_, name, t) in other.iter() {
            if let Some(id) = self.params.find(name) {
                self.params.get_mut(id).assign(t).map_err(|_| {
                    Error::invalid(format!(
                        "parameter {name}: shape {:?} vs {:?}",
                        self.params.get(id).shape(),
                        t.shape()
                    ))
                })?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_blocks_hold_identical_ids() {
        let m = WideNet::new(WideNetConfig::default(), 0).unwrap();
        let b = &m.layout.blocks;
        assert!(b.windows(2).all(|w| w[0].attn == w[1].attn && w[0].ffn == w[1].ffn));
        assert!(b.windows(2).all(|w| w[0].att_norm != w[1].att_norm));
    }

    #[test]
    fn closed_form_count_matches_store() {
        let cfg = WideNetConfig::default();
        let m = WideNet::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.count_parameters(), cfg.parameter_count());
    }

    #[test]
    fn init_values() {
        let m = WideNet::new(WideNetConfig::default(), 0).unwrap();
        let b0 = &m.layout.blocks[0];
        assert!(m.params.get(b0.att_norm.gamma).data().iter().all(|&v| v == 1.0));
        assert!(m.params.get(b0.att_norm.beta).data().iter().all(|&v| v == 0.0));
        assert!(m.params.get(b0.attn.bq).data().iter().all(|&v| v == 0.0));
        let wq = m.params.get(b0.attn.wq).data();
        assert!(wq.iter().all(|v| v.abs() <= 0.04));
        assert!(wq.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = WideNet::new(WideNetConfig::default(), 7).unwrap();
        let b = WideNet::new(WideNetConfig::default(), 7).unwrap();
        for ((_, _, x), (_, _, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }
}
