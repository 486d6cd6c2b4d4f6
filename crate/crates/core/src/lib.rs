//! WideNet: a transformer that goes wider instead of deeper.
//!
//! One attention layer and one mixture-of-experts layer are shared by every
//! block of the stack, while each block keeps its own layer-norm vectors.
//! Everything runs on a small f64 tensor engine with a reverse-mode tape so
//! each mechanism (noisy top-k routing, capacity dropping, the load-balance
//! loss, group routing, per-block norms) can be checked against
//! finite differences and brute-force oracles.
//!
//! Layout:
//!
//! - [`tensor`]: tensors, the differentiation tape, seeded random streams.
//! - [`moe`]: routing, capacity-bounded dispatch, expert combine, balance loss.
//! - [`model`]: the shared-block stack, embeddings, heads, checkpoints.
//! - [`train`]: losses, optimizers, schedules, toy datasets, the training loop.
//! - [`analysis`]: layer-norm divergence and expert-utilization diagnostics.
//! - [`run`]: run configuration, presets and command implementations.
//! - [`verify`]: the built-in verification battery.

pub mod analysis;
pub mod error;
pub mod model;
pub mod moe;
pub mod run;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
