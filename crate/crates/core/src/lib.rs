//! Adaptive mixed-bit activation quantization (AMAQ) for split learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode AD with custom-gradient ops.
//! - [`quant`]: fixed-bit, delta (AQ-SGD) and learnable-bit quantizers.
//! - [`nets`]: toy MLP / decoder-only transformer split into three stages.
//! - [`wire`]: bit-packed tensor format, framing and the client/server session.
//! - [`harness`]: optimizers, tasks, the training loop and metrics.
//! - [`cli`]: run configuration and the operator commands behind the `amaq` binary.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod harness;
pub mod nets;
pub mod quant;
pub mod wire;

pub use error::{Error, Result};
