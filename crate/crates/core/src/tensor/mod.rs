//! Dense f64 tensors, a reverse-mode tape, and seeded random streams.
//!
//! Value-level operations live on [`Tensor`]; the same operations recorded
//! on a [`Tape`] become differentiable. Broadcasting is limited to the
//! documented cases: scalar add/scale, [`Tensor::add_row`] and
//! [`Tensor::mul_rows`].

mod dense;
mod gradcheck;
pub(crate) mod kernels;
mod params;
mod rng;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use params::{ParamId, ParamStore};
pub use rng::{RngState, RngStream};
pub use tape::{Tape, Var};
