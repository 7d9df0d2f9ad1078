//! Stage partitions, quant sites, and the unsplit reference model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::quant::{
    amaq_quant, aqsgd_fake_quant, bits_loss, bits_loss_var, fake_quant, grad_quant, init_gating, mean_bits, ste,
    wire_bits, AqsgdCache, GatingParams, QuantAxis, QuantMode, QuantPacket, UnitLayout,
};

use super::layers::{Embed, Head, Init, Layer};
use super::{ModelConfig, QuantSites, Stage};

/// A boundary where activations (forward) and gradients (backward) are quantized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteSpec {
    pub name: String,
    /// Activation boundary index in `0..=n_layers`.
    pub boundary: usize,
    pub owner: Stage,
    /// Output crosses the network to the next stage.
    pub network: bool,
}

/// Every quant site of a configuration in forward order.
pub fn site_specs(cfg: &ModelConfig) -> Vec<SiteSpec> {
    let (f, b) = cfg.split;
    let n = cfg.n_layers;
    let owner = |j: usize| {
        if j <= f {
            Stage::ClientFront
        } else if j <= b {
            Stage::ServerMiddle
        } else {
            Stage::ClientBack
        }
    };
    let mut out = Vec::new();
    for j in 0..=n {
        let keep = match cfg.quant_sites {
            QuantSites::AllLayers => true,
            QuantSites::BoundaryOnly => j == f || j == b,
        };
        if keep {
            let o = owner(j);
            out.push(SiteSpec {
                name: format!("act{j}"),
                boundary: j,
                owner: o,
                network: (o == Stage::ClientFront && j == f) || (o == Stage::ServerMiddle && j == b),
            });
        }
        if j == f && f == b {
            // the server holds no layers; it still forwards through its own site
            out.push(SiteSpec {
                name: format!("act{j}r"),
                boundary: j,
                owner: Stage::ServerMiddle,
                network: true,
            });
        }
    }
    out
}

/// What crosses a stage boundary.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Full-precision tensor.
    Raw(Tensor),
    /// Quantized tensor; the receiver dequantizes it directly.
    Quantized(QuantPacket),
    /// Quantized difference against the receiver's cached reconstruction.
    Delta(QuantPacket),
}

impl Payload {
    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::Raw(t) => t.shape(),
            Payload::Quantized(p) | Payload::Delta(p) => &p.shape,
        }
    }
}

/// Per-site record of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteStat {
    pub name: String,
    pub owner: Stage,
    pub mean_bits: f64,
    pub bits_loss: f64,
    pub act_min: f32,
    pub act_max: f32,
}

pub enum StageInput<'a> {
    /// Row-major `[batch, seq]` token ids (client front only).
    Tokens { ids: &'a [usize], batch: usize, seq: usize },
    /// Output of the previous stage (server middle, client back).
    Activation(&'a Payload),
}

/// Forward context shared by all stages of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepCtx<'a> {
    /// Dataset index of every batch row; keys the delta-quantization caches.
    pub samples: &'a [u64],
    pub train: bool,
}

/// How to quantize the gradient of a received activation.
#[derive(Clone, Debug)]
enum GradSpec {
    Raw,
    Quant { layout: UnitLayout, bits: Vec<f64> },
}

/// A recorded stage forward, ready for backward.
pub struct StageOutput {
    pub tape: Tape,
    /// Leaf holding the received activation.
    pub input: Option<Var>,
    /// Activation leaving the stage, or logits for the client back.
    pub output: Var,
    /// What to transmit to the next stage.
    pub payload: Option<Payload>,
    pub stats: Vec<SiteStat>,
    bits_vars: Vec<Var>,
    inbound: Option<GradSpec>,
}

struct Recording {
    tape: Tape,
    payload: Option<Payload>,
    stats: Vec<SiteStat>,
    bits_vars: Vec<Var>,
}

/// Where the backward pass starts.
pub enum Upstream<'a> {
    /// Scalar loss recorded on the stage's own tape.
    Loss(Var),
    /// Gradient received for the stage output.
    Grad(&'a Payload),
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Block {
    Embed(Embed),
    Layer(Layer),
    Head(Head),
}

#[derive(Clone, Debug)]
struct OwnedSite {
    spec: SiteSpec,
    /// Index of the block after which the site sits; `None` for a relay on the input.
    after: Option<usize>,
    gate: Option<(ParamId, GatingParams)>,
}

/// One of the three split stages.
pub struct ModelPartition {
    pub stage: Stage,
    pub config: ModelConfig,
    pub quant: QuantMode,
    pub params: ParamStore,
    blocks: Vec<Block>,
    sites: Vec<OwnedSite>,
    inbound: Option<SiteSpec>,
    total_sites: usize,
    tx_cache: AqsgdCache,
    rx_cache: AqsgdCache,
}

/// Unsplit model with the same weights as [`build_model`] for equal seeds.
pub struct Monolith {
    pub config: ModelConfig,
    pub params: ParamStore,
    blocks: Vec<Block>,
}

fn block_ranges(cfg: &ModelConfig) -> [(bool, std::ops::Range<usize>, bool); 3] {
    let (f, b) = cfg.split;
    [
        (true, 0..f, false),
        (false, f..b, false),
        (false, b..cfg.n_layers, true),
    ]
}

fn make_blocks(
    init: &mut Init,
    cfg: &ModelConfig,
    embed: bool,
    layers: std::ops::Range<usize>,
    head: bool,
    prefix: &str,
) -> Vec<Block> {
    let mut blocks = Vec::new();
    if embed {
        blocks.push(Block::Embed(init.embed(&format!("{prefix}embed"), cfg)));
    }
    for i in layers {
        blocks.push(Block::Layer(init.layer(&format!("{prefix}layer{i}"), cfg)));
    }
    if head {
        blocks.push(Block::Head(init.head(&format!("{prefix}head"), cfg)));
    }
    blocks
}

/// Builds the three partitions without quantization.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<[ModelPartition; 3]> {
    build_model_with_quant(cfg, &QuantMode::None, seed)
}

/// Builds the three partitions with `quant` active at every site.
pub fn build_model_with_quant(cfg: &ModelConfig, quant: &QuantMode, seed: u64) -> Result<[ModelPartition; 3]> {
    cfg.validate()?;
    quant.validate()?;
    let specs = site_specs(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::with_capacity(3);
    for (stage, (embed, layers, head)) in Stage::ALL.into_iter().zip(block_ranges(cfg)) {
        let mut params = ParamStore::new();
        let prefix = format!("{}.", stage.prefix());
        let layer_start = layers.start;
        let blocks = {
            let mut init = Init {
                store: &mut params,
                rng: &mut rng,
                tuning: cfg.tuning,
            };
            make_blocks(&mut init, cfg, embed, layers, head, &prefix)
        };
        let mut sites = Vec::new();
        for spec in specs.iter().filter(|s| s.owner == stage) {
            let after = if spec.name.ends_with('r') {
                None
            } else if spec.boundary == 0 {
                Some(0)
            } else {
                // boundary j is the output of layer j - 1
                Some(spec.boundary - 1 - layer_start + usize::from(embed))
            };
            let gate = match quant {
                QuantMode::Amaq {
                    b_min,
                    b_max,
                    b_init,
                    target,
                    alpha,
                    clip,
                    axis,
                    ..
                } => {
                    let len = match axis {
                        QuantAxis::Channel => cfg.d_model,
                        QuantAxis::Token => cfg.max_seq_len,
                    };
                    let mut gp = init_gating(*b_init, *b_min, *b_max, *alpha, len)?;
                    gp.target_bits = *target;
                    gp.clip = *clip;
                    gp.axis = *axis;
                    let id = params.add(
                        format!("{prefix}gate.{}.q", spec.name),
                        Tensor::from_vec(gp.q.clone()),
                        true,
                        ParamGroup::Gating,
                    );
                    Some((id, gp))
                }
                _ => None,
            };
            sites.push(OwnedSite {
                spec: spec.clone(),
                after,
                gate,
            });
        }
        let inbound = match stage {
            Stage::ClientFront => None,
            Stage::ServerMiddle => specs
                .iter()
                .find(|s| s.owner == Stage::ClientFront && s.network)
                .cloned(),
            Stage::ClientBack => specs
                .iter()
                .find(|s| s.owner == Stage::ServerMiddle && s.network)
                .cloned(),
        };
        parts.push(ModelPartition {
            stage,
            config: cfg.clone(),
            quant: quant.clone(),
            params,
            blocks,
            sites,
            inbound,
            total_sites: specs.len(),
            tx_cache: AqsgdCache::new(),
            rx_cache: AqsgdCache::new(),
        });
    }
    let mut it = parts.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
}

/// Builds the unsplit model; parameter names drop the stage prefix.
pub fn build_monolith(cfg: &ModelConfig, seed: u64) -> Result<Monolith> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut blocks = Vec::new();
    for (embed, layers, head) in block_ranges(cfg) {
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
            tuning: cfg.tuning,
        };
        blocks.extend(make_blocks(&mut init, cfg, embed, layers, head, ""));
    }
    Ok(Monolith {
        config: cfg.clone(),
        params,
        blocks,
    })
}

impl Monolith {
    /// Logits `[batch, seq, vocab]`.
    pub fn forward(&self, tape: &mut Tape, ids: &[usize], batch: usize, seq: usize) -> Result<Var> {
        let mut x = None;
        for block in &self.blocks {
            x = Some(run_block(block, tape, &self.params, x, Some((ids, batch, seq)))?);
        }
        x.ok_or_else(|| Error::Invalid("empty model".into()))
    }
}

fn run_block(
    block: &Block,
    tape: &mut Tape,
    store: &ParamStore,
    x: Option<Var>,
    tokens: Option<(&[usize], usize, usize)>,
) -> Result<Var> {
    match block {
        Block::Embed(e) => {
            let (ids, b, t) = tokens.ok_or_else(|| Error::Invalid("embedding needs token ids".into()))?;
            e.forward(tape, store, ids, b, t)
        }
        Block::Layer(l) => l.forward(
            tape,
            store,
            x.ok_or_else(|| Error::Invalid("layer needs an input".into()))?,
        ),
        Block::Head(h) => h.forward(
            tape,
            store,
            x.ok_or_else(|| Error::Invalid("head needs an input".into()))?,
        ),
    }
}

fn range_of(t: &Tensor) -> (f32, f32) {
    t.data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

impl ModelPartition {
    /// Sites owned by this stage, in forward order.
    pub fn sites(&self) -> Vec<&SiteSpec> {
        self.sites.iter().map(|s| &s.spec).collect()
    }

    /// Network site whose output this stage receives.
    pub fn inbound_site(&self) -> Option<&SiteSpec> {
        self.inbound.as_ref()
    }

    /// Site count of the whole model, across all stages.
    pub fn total_sites(&self) -> usize {
        self.total_sites
    }

    /// Current gate of a site owned by this stage.
    pub fn gating(&self, site: &str) -> Option<GatingParams> {
        self.sites.iter().find(|s| s.spec.name == site).and_then(|s| {
            s.gate.as_ref().map(|(id, gp)| GatingParams {
                q: self.params.value(*id).data().to_vec(),
                ..gp.clone()
            })
        })
    }

    /// Drops every cached reconstruction.
    pub fn reset_caches(&mut self) {
        self.tx_cache = AqsgdCache::new();
        self.rx_cache = AqsgdCache::new();
    }

    fn receive(&mut self, p: &Payload, ctx: StepCtx) -> Result<(Tensor, GradSpec)> {
        let want_d = self.config.d_model;
        if p.shape().len() != 3 || p.shape()[2] != want_d {
            return Err(Error::shape("receive", p.shape(), &[0, 0, want_d]));
        }
        match p {
            Payload::Raw(t) => Ok((t.clone(), GradSpec::Raw)),
            Payload::Quantized(pk) | Payload::Delta(pk) => {
                pk.validate()?;
                let spec = GradSpec::Quant {
                    layout: pk.layout,
                    bits: pk.wire_bits.iter().map(|&w| w as f64).collect(),
                };
                let x = pk.dequantize();
                if let Payload::Delta(_) = p {
                    let site = self
                        .inbound
                        .as_ref()
                        .ok_or_else(|| Error::Invalid("stage has no inbound site".into()))?
                        .name
                        .clone();
                    return Ok((self.rx_cache.reconstruct(&site, ctx.samples, &x)?, spec));
                }
                Ok((x, spec))
            }
        }
    }

    /// Runs the stage; records a tape for [`ModelPartition::backward`].
    pub fn forward(&mut self, input: StageInput, ctx: StepCtx) -> Result<StageOutput> {
        let mut tape = Tape::new();
        let (mut x, tokens, inbound) = match (self.stage, input) {
            (Stage::ClientFront, StageInput::Tokens { ids, batch, seq }) => (None, Some((ids, batch, seq)), None),
            (Stage::ServerMiddle | Stage::ClientBack, StageInput::Activation(p)) => {
                let (value, spec) = self.receive(p, ctx)?;
                if value.shape()[1] > self.config.max_seq_len {
                    return Err(Error::Invalid(format!(
                        "sequence length {} exceeds max_seq_len {}",
                        value.shape()[1],
                        self.config.max_seq_len
                    )));
                }
                (Some(tape.leaf(value, true)), None, Some(spec))
            }
            (stage, _) => return Err(Error::Invalid(format!("wrong input kind for stage {stage:?}"))),
        };
        let input = x;
        let mut out = Recording {
            tape,
            payload: None,
            stats: Vec::new(),
            bits_vars: Vec::new(),
        };
        for i in 0..self.sites.len() {
            if self.sites[i].after.is_none() {
                x = Some(self.apply_site(&mut out, i, x.expect("relay has an input"), ctx)?);
            }
        }
        for bi in 0..self.blocks.len() {
            x = Some(run_block(&self.blocks[bi], &mut out.tape, &self.params, x, tokens)?);
            for i in 0..self.sites.len() {
                if self.sites[i].after == Some(bi) {
                    x = Some(self.apply_site(&mut out, i, x.unwrap(), ctx)?);
                }
            }
        }
        let output = x.ok_or_else(|| Error::Invalid(format!("stage {:?} has no layers and no sites", self.stage)))?;
        if matches!(self.stage, Stage::ClientFront | Stage::ServerMiddle) && out.payload.is_none() {
            out.payload = Some(Payload::Raw(out.tape.value(output).clone()));
        }
        Ok(StageOutput {
            tape: out.tape,
            input,
            output,
            payload: out.payload,
            stats: out.stats,
            bits_vars: out.bits_vars,
            inbound,
        })
    }

    fn apply_site(&mut self, out: &mut Recording, i: usize, x: Var, ctx: StepCtx) -> Result<Var> {
        let site = &self.sites[i];
        let name = site.spec.name.clone();
        let network = site.spec.network;
        let tape = &mut out.tape;
        let xv = tape.value(x).clone();
        let (act_min, act_max) = range_of(&xv);
        let shape = xv.shape().to_vec();
        let mut stat = SiteStat {
            name: name.clone(),
            owner: self.stage,
            mean_bits: 32.0,
            bits_loss: 0.0,
            act_min,
            act_max,
        };
        let (y, payload) = match &self.quant {
            QuantMode::None => (x, Payload::Raw(xv)),
            QuantMode::Fixed { bits, granularity } | QuantMode::Aqsgd { bits, granularity } => {
                stat.mean_bits = *bits;
                let layout = UnitLayout::new(&shape, *granularity, QuantAxis::Channel)?;
                let delta_mode = matches!(self.quant, QuantMode::Aqsgd { .. }) && ctx.train;
                let (x_hat, payload) = if delta_mode {
                    let r = aqsgd_fake_quant(&xv, &mut self.tx_cache, &name, ctx.samples, *bits, layout)?;
                    (r.x_hat, Payload::Delta(QuantPacket::from_result(&r.delta)))
                } else {
                    let r = fake_quant(&xv, &[*bits], layout)?;
                    let p = QuantPacket::from_result(&r);
                    (r.x_hat, Payload::Quantized(p))
                };
                let mut y = ste(tape, x, x_hat)?;
                if !network {
                    y = grad_quant(tape, y, vec![wire_bits(*bits) as f64], layout);
                }
                (y, payload)
            }
            QuantMode::Amaq { .. } => {
                let (id, template) = site.gate.as_ref().expect("amaq sites carry a gate");
                let full = GatingParams {
                    q: self.params.value(*id).data().to_vec(),
                    ..template.clone()
                };
                stat.mean_bits = mean_bits(&full);
                stat.bits_loss = bits_loss(&full).0;
                let qv = tape.param(&self.params, *id);
                let used = match full.axis {
                    QuantAxis::Channel => shape[shape.len() - 1],
                    QuantAxis::Token => shape[shape.len() - 2],
                };
                if used > full.q.len() {
                    return Err(Error::shape("amaq site", &shape, &[full.q.len()]));
                }
                let (qu, gpu) = if used < full.q.len() {
                    let gpu = GatingParams {
                        q: full.q[..used].to_vec(),
                        ..full.clone()
                    };
                    (tape.slice(qv, 0, 0, used)?, gpu)
                } else {
                    (qv, full.clone())
                };
                let (mut y, r) = amaq_quant(tape, x, qu, &gpu)?;
                if ctx.train {
                    out.bits_vars.push(bits_loss_var(tape, qv, &full)?);
                }
                if !network {
                    let bits = r.wire_bits().iter().map(|&w| w as f64).collect();
                    y = grad_quant(tape, y, bits, r.layout);
                }
                (y, Payload::Quantized(QuantPacket::from_result(&r)))
            }
        };
        out.stats.push(stat);
        if network {
            out.payload = Some(payload);
        }
        Ok(y)
    }

    /// Backpropagates the stage. `bits_weight` scales every owned site's bit
    /// regularizer. Returns the quantized gradient of the received activation.
    pub fn backward(&mut self, out: StageOutput, upstream: Upstream, bits_weight: f64) -> Result<Option<Payload>> {
        let mut roots = Vec::with_capacity(1 + out.bits_vars.len());
        match upstream {
            Upstream::Loss(v) => roots.push((v, Tensor::full(out.tape.shape(v), 1.0))),
            Upstream::Grad(p) => {
                let g = match p {
                    Payload::Raw(t) => t.clone(),
                    Payload::Quantized(pk) => {
                        pk.validate()?;
                        pk.dequantize()
                    }
                    Payload::Delta(_) => return Err(Error::Invalid("gradients are never delta coded".into())),
                };
                if g.shape() != out.tape.shape(out.output) {
                    return Err(Error::shape("backward", g.shape(), out.tape.shape(out.output)));
                }
                roots.push((out.output, g));
            }
        }
        for &v in &out.bits_vars {
            roots.push((v, Tensor::scalar(bits_weight as f32)));
        }
        let mut grads = out.tape.backward_seeded(&roots, &mut self.params)?;
        let Some(input) = out.input else {
            return Ok(None);
        };
        let g = grads
            .take(input)
            .unwrap_or_else(|| Tensor::zeros(out.tape.shape(input)));
        Ok(Some(match out.inbound.expect("input implies inbound spec") {
            GradSpec::Raw => Payload::Raw(g),
            GradSpec::Quant { layout, bits } => {
                Payload::Quantized(QuantPacket::from_result(&fake_quant(&g, &bits, layout)?))
            }
        }))
    }
}
