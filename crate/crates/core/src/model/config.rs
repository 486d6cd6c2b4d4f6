use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::Activation;

/// Classification head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadType {
    /// Classify a `[CLS]` token prepended to every sequence.
    TokenCls,
    /// Classify the mean of all final token vectors.
    #[default]
    GlobalAvgPool,
}

fn default_embed_dim() -> usize {
    128
}

/// Input embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedConfig {
    /// Square `channels × image_size × image_size` images cut into
    /// non-overlapping `patch_size` patches and linearly projected.
    Patch {
        image_size: usize,
        patch_size: usize,
        channels: usize,
    },
    /// Factorized token embedding: `vocab × embed_dim` lookup, then an
    /// `embed_dim × d_model` projection.
    Token {
        vocab: usize,
        #[serde(default = "default_embed_dim")]
        embed_dim: usize,
        max_len: usize,
    },
}

impl EmbedConfig {
    /// Tokens per example produced by the embedding, before any class token.
    pub fn tokens(&self) -> usize {
        match *self {
            EmbedConfig::Patch {
                image_size,
                patch_size,
                ..
            } => (image_size / patch_size.max(1)).pow(2),
            EmbedConfig::Token { max_len, .. } => max_len,
        }
    }
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WideNetConfig {
    /// Number of transformer blocks `D`.
    pub depth: usize,
    pub d_model: usize,
    /// Inner width of each expert (or of the dense FFN).
    pub d_ff: usize,
    pub heads: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Capacity ratio `C`.
    pub capacity_ratio: f64,
    /// Balance-loss weight `λ`.
    #[serde(rename = "lambda")]
    pub balance_weight: f64,
    /// Routing groups `G`; each group of `D/G` consecutive blocks reuses
    /// one routing decision.
    pub groups: usize,
    pub share_attn: bool,
    pub share_moe: bool,
    pub share_ln: bool,
    /// Replace the MoE layer by one dense FFN.
    pub use_moe: bool,
    pub head: HeadType,
    pub embed: EmbedConfig,
    pub num_classes: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub ln_eps: f64,
}

impl Default for WideNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            num_experts: 4,
            top_k: 2,
            capacity_ratio: 1.2,
            balance_weight: 0.01,
            groups: 4,
            share_attn: true,
            share_moe: true,
            share_ln: false,
            use_moe: true,
            head: HeadType::GlobalAvgPool,
            embed: EmbedConfig::Token {
                vocab: 32,
                embed_dim: 16,
                max_len: 8,
            },
            num_classes: 4,
            dropout: 0.0,
            activation: Activation::Gelu,
            ln_eps: 1e-6,
        }
    }
}

impl WideNetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.depth == 0 {
            return fail("depth", "must be >= 1".into());
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return fail("d_model", "widths must be >= 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(
                "heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            );
        }
        if self.num_experts == 0 {
            return fail("num_experts", "must be >= 1".into());
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return fail(
                "top_k",
                format!("must be in 1..={} (num_experts), got {}", self.num_experts, self.top_k),
            );
        }
        if !(self.capacity_ratio > 0.0) || !self.capacity_ratio.is_finite() {
            return fail("capacity_ratio", format!("must be > 0, got {}", self.capacity_ratio));
        }
        if !(self.balance_weight >= 0.0) || !self.balance_weight.is_finite() {
            return fail("lambda", format!("must be >= 0, got {}", self.balance_weight));
        }
        if self.groups == 0 || self.depth % self.groups != 0 {
            return fail(
                "groups",
                format!("{} groups do not divide depth {}", self.groups, self.depth),
            );
        }
        if self.num_classes == 0 {
            return fail("num_classes", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps", format!("must be > 0, got {}", self.ln_eps));
        }
        match self.embed {
            EmbedConfig::Patch {
                image_size,
                patch_size,
                channels,
            } => {
                if patch_size == 0 || image_size == 0 || image_size % patch_size != 0 {
                    return fail(
                        "embed.patch_size",
                        format!("image size {image_size} is not divisible by patch size {patch_size}"),
                    );
                }
                if channels == 0 {
                    return fail("embed.channels", "must be >= 1".into());
                }
            }
            EmbedConfig::Token {
                vocab,
                embed_dim,
                max_len,
            } => {
                if vocab == 0 || embed_dim == 0 || max_len == 0 {
                    return fail("embed", "vocab, embed_dim and max_len must be >= 1".into());
                }
            }
        }
        Ok(())
    }

    pub fn has_class_token(&self) -> bool {
        self.head == HeadType::TokenCls
    }

    /// Sequence length seen by the blocks, including any class token.
    pub fn seq_len(&self) -> usize {
        self.embed.tokens() + usize::from(self.has_class_token())
    }

    pub fn blocks_per_group(&self) -> usize {
        self.depth / self.groups
    }

    /// Number of routing operations per forward pass.
    pub fn routing_ops(&self) -> usize {
        if self.use_moe {
            self.groups
        } else {
            0
        }
    }

    fn attention_params(&self) -> usize {
        4 * (self.d_model * self.d_model + self.d_model)
    }

    fn expert_params(&self) -> usize {
        2 * self.d_model * self.d_ff + self.d_ff + self.d_model
    }

    /// Router plus all experts, or the dense FFN.
    fn ffn_params(&self) -> usize {
        if self.use_moe {
            self.d_model * self.num_experts + self.num_experts * self.expert_params()
        } else {
            self.expert_params()
        }
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let embed = match self.embed {
            EmbedConfig::Patch {
                patch_size, channels, ..
            } => patch_size * patch_size * channels * d + d,
            EmbedConfig::Token { vocab, embed_dim, .. } => vocab * embed_dim + embed_dim * d,
        };
        let positions = self.seq_len() * d;
        let class_token = if self.has_class_token() { d } else { 0 };
        let copies = |shared: bool| if shared { 1 } else { self.depth };
        let blocks = copies(self.share_attn) * self.attention_params()
            + copies(self.share_moe) * self.ffn_params()
            + copies(self.share_ln) * 4 * d;
        let final_norm = 2 * d;
        let head = d * self.num_classes + self.num_classes;
        embed + positions + class_token + blocks + final_norm + head
    }
}
