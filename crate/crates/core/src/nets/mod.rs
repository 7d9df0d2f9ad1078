//! Toy models split into three pipeline stages.
//!
//! The layer chain is `embed, layer_0 .. layer_{n-1}, head`. With split
//! `(f, b)` the client front runs the embedding and layers `0..f`, the
//! server runs layers `f..b`, and the client back runs layers `b..n` plus
//! the head. Activation boundaries are numbered `0..=n`: boundary `j` is the
//! output of the embedding (`j = 0`) or of layer `j - 1`.

mod checkpoint;
mod layers;
mod model;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use layers::{lora_forward, Linear, LoraAdapter};
pub use model::{
    build_model, build_model_with_quant, build_monolith, site_specs, ModelPartition, Monolith, Payload, SiteSpec,
    SiteStat, StageInput, StageOutput, StepCtx, Upstream,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Position-wise residual MLP blocks.
    Mlp,
    /// Pre-norm decoder-only transformer blocks.
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Tuning {
    /// Frozen base weights with low-rank adapters on every block linear.
    Lora { rank: usize, lora_alpha: f32 },
    /// Every weight trains.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantSites {
    /// Only the two network boundaries.
    #[default]
    BoundaryOnly,
    /// Every layer boundary, plus the head input.
    AllLayers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ClientFront,
    ServerMiddle,
    ClientBack,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::ClientFront, Stage::ServerMiddle, Stage::ClientBack];

    pub fn prefix(self) -> &'static str {
        match self {
            Stage::ClientFront => "front",
            Stage::ServerMiddle => "middle",
            Stage::ClientBack => "back",
        }
    }
}

fn default_ff_mult() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// `(front_end_layer, back_start_layer)`.
    pub split: (usize, usize),
    pub tuning: Tuning,
    #[serde(default)]
    pub quant_sites: QuantSites,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (f, b) = self.split;
        if !(f <= b && b <= self.n_layers) {
            return Err(Error::Config(format!(
                "model.split ({f}, {b}) must satisfy 0 <= front_end_layer <= back_start_layer <= n_layers = {}",
                self.n_layers
            )));
        }
        if self.d_model == 0 || self.vocab_size == 0 || self.max_seq_len == 0 || self.ff_mult == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.arch == Arch::Transformer && (self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads)) {
            return Err(Error::Config(format!(
                "model.n_heads = {} must divide d_model = {}",
                self.n_heads, self.d_model
            )));
        }
        if let Tuning::Lora { rank, .. } = self.tuning {
            if rank == 0 {
                return Err(Error::Config("model.tuning.rank must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn digest(&self) -> String {
        digest_json(&serde_json::to_string(self).expect("config serializes"))
    }
}

pub(crate) fn digest_json(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}
