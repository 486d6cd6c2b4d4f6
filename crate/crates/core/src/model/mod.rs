//! The WideNet stack: configuration, parameter layout with depth sharing,
//! embeddings, blocks, heads and checkpoints.

mod checkpoint;
mod config;
mod embed;
mod forward;
mod head;
mod layers;
mod params;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, read_manifest, save_checkpoint, Checkpoint, Manifest, TensorEntry,
    BLOB_FILE, MAGIC, MANIFEST_FILE,
};
pub use config::{EmbedConfig, HeadType, WideNetConfig};
pub use embed::{add_positions, patch_embed, patch_matrix, prepend_class_token, token_embed_factorized};
pub use forward::{Batch, ForwardOptions, ForwardOutput};
pub use head::{head_forward, pool};
pub use layers::{
    block_forward, dropout, layer_norm, mha_forward, AttentionVars, BlockContext, BlockOutput, BlockVars,
    FeedForwardVars, NormVars, Routing, Stage, TraceEvent,
};
pub use params::{AttentionIds, BlockIds, EmbedIds, ExpertIds, FeedForwardIds, ModelLayout, NormIds, WideNet};
