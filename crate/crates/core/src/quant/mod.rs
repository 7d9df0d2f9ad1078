//! Activation quantizers.
//!
//! - [`fake`]: fixed-bit fake quantization at tensor, channel or group
//!   granularity, with fractional bit-widths allowed.
//! - [`gating`]: the learnable per-channel bit-width gate and its regularizer.
//! - [`amaq`]: the learnable-bit quantizer and straight-through tape ops.
//! - [`aqsgd`]: delta quantization against a cached reconstruction.
//! - [`packet`]: indices plus metadata, the form that crosses the wire.

pub mod amaq;
pub mod aqsgd;
pub mod fake;
pub mod gating;
pub mod packet;

use serde::{Deserialize, Serialize};

pub use amaq::{amaq_backward, amaq_fake_quant, amaq_quant, grad_quant, ste, step_size_grad};
pub use aqsgd::{aqsgd_fake_quant, AqsgdCache, AqsgdResult};
pub use fake::{fake_quant, fake_quant_uniform, wire_bits, FakeQuantResult, UnitLayout};
pub use gating::{bits_loss, bits_loss_var, effective_bits, init_gating, mean_bits, ClipMode, GatingParams};
pub use packet::QuantPacket;

/// Unit size of a quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Tensor,
    Channel,
    /// Contiguous groups of this many entries; the last group may be short.
    Group(usize),
}

/// Axis that carries one gate entry (or one quantization range) per index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantAxis {
    /// Last axis (hidden features).
    #[default]
    Channel,
    /// Second-to-last axis (sequence positions).
    Token,
}

fn default_alpha() -> f32 {
    1.0
}

fn default_granularity() -> Granularity {
    Granularity::Channel
}

/// Which quantizer runs at every quant site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuantMode {
    /// Full precision activations and gradients.
    None,
    Fixed {
        bits: f64,
        #[serde(default = "default_granularity")]
        granularity: Granularity,
    },
    Aqsgd {
        bits: f64,
        #[serde(default = "default_granularity")]
        granularity: Granularity,
    },
    Amaq {
        b_min: f64,
        b_max: f64,
        b_init: f64,
        target: f64,
        #[serde(default = "default_alpha")]
        alpha: f32,
        beta: f64,
        #[serde(default)]
        clip: ClipMode,
        #[serde(default)]
        axis: QuantAxis,
    },
}

impl QuantMode {
    pub fn name(&self) -> &'static str {
        match self {
            QuantMode::None => "none",
            QuantMode::Fixed { .. } => "fixed",
            QuantMode::Aqsgd { .. } => "aqsgd",
            QuantMode::Amaq { .. } => "amaq",
        }
    }

    /// Weight of the bit regularizer (zero for non-learnable modes).
    pub fn beta(&self) -> f64 {
        match self {
            QuantMode::Amaq { beta, .. } => *beta,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| Err(crate::Error::Config(m));
        match self {
            QuantMode::None => Ok(()),
            QuantMode::Fixed { bits, granularity } | QuantMode::Aqsgd { bits, granularity } => {
                if !(1.0..=16.0).contains(bits) {
                    return bad(format!("quant.bits must be in [1, 16], got {bits}"));
                }
                if *granularity == Granularity::Group(0) {
                    return bad("quant.granularity.group must be positive".into());
                }
                Ok(())
            }
            QuantMode::Amaq {
                b_min,
                b_max,
                b_init,
                target,
                alpha,
                beta,
                ..
            } => {
                let gp = init_gating(*b_init, *b_min, *b_max, *alpha, 1)
                    .map_err(|e| crate::Error::Config(format!("quant: {e}")))?;
                let gp = GatingParams {
                    target_bits: *target,
                    ..gp
                };
                gp.validate().map_err(|e| crate::Error::Config(format!("quant: {e}")))?;
                if *beta < 0.0 {
                    return bad(format!("quant.beta must be >= 0, got {beta}"));
                }
                Ok(())
            }
        }
    }
}
