//! Minimal reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Tape`] records one forward pass; persistent weights live in a
//! [`ParamStore`] and are pulled onto the tape with [`Tape::param`].
//! Ops with hand-written gradients (straight-through quantizers, for
//! instance) plug in through [`CustomOp`].

mod ops;
mod params;
mod tape;
mod tensor;

pub mod gradcheck;

pub use ops::{gelu, gelu_grad};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var, IGNORE_INDEX};
pub use tensor::Tensor;
