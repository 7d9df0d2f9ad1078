//! Client and server step logic.
//!
//! One training step is four hand-offs of encoded bytes:
//!
//! ```text
//! client.begin_step      -> FWD_ACT  -> server.on_forward
//! server.on_forward      -> FWD_ACT  -> client.on_forward
//! client.on_forward      -> BWD_GRAD -> server.on_backward
//! server.on_backward     -> BWD_GRAD -> client.finish_step
//! ```
//!
//! Local training calls these directly; the TCP session wraps each hand-off
//! in a frame. Both paths therefore run identical arithmetic.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, IGNORE_INDEX};
use crate::cli::RunConfig;
use crate::error::{Error, Result};
use crate::nets::{
    build_model_with_quant, site_specs, ModelPartition, SiteStat, StageInput, StageOutput, StepCtx, Upstream,
};
use crate::quant::QuantMode;
use crate::wire::{decode_payload, encode_payload, PackedMeta, Role, ID_EVAL, ID_MASK};

use super::metrics::{RunMetrics, SiteMetric};
use super::optim::Optimizer;
use super::tasks::{make_task, Batch, Schedule, Task};

/// Gating learning rate and regularizer weight of one endpoint, with the
/// optional one-shot decay once its sites reach target.
#[derive(Clone, Debug, PartialEq)]
pub struct BitControl {
    pub bits_lr: f64,
    pub beta: f64,
    pub decayed: bool,
    decay: Option<f64>,
    target: Option<f64>,
    total_sites: usize,
}

impl BitControl {
    fn new(cfg: &RunConfig) -> Self {
        let target = match cfg.quant {
            QuantMode::Amaq { target, .. } => Some(target),
            _ => None,
        };
        BitControl {
            bits_lr: cfg.optim.bits_lr,
            beta: cfg.quant.beta(),
            decayed: false,
            decay: cfg.optim.schedule.map(|s| s.factor),
            target,
            total_sites: site_specs(&cfg.model).len(),
        }
    }

    /// Weight on each site's regularizer: the total loss uses the mean over sites.
    pub fn bits_weight(&self) -> f64 {
        self.beta / self.total_sites.max(1) as f64
    }

    fn observe(&mut self, stats: &[SiteStat]) {
        let (Some(f), Some(t)) = (self.decay, self.target) else {
            return;
        };
        if !self.decayed && !stats.is_empty() && stats.iter().all(|s| s.mean_bits <= t) {
            self.bits_lr *= f;
            self.beta *= f;
            self.decayed = true;
        }
    }
}

fn site_metrics(stats: &[SiteStat]) -> Vec<SiteMetric> {
    stats
        .iter()
        .map(|s| SiteMetric {
            site: s.name.clone(),
            mean_bits: s.mean_bits,
            bits_loss: s.bits_loss,
        })
        .collect()
}

fn site_index(cfg: &RunConfig, name: &str) -> u32 {
    site_specs(&cfg.model).iter().position(|s| s.name == name).unwrap_or(0) as u32
}

fn diagnostic(loss: f32, stats: &[SiteStat]) -> String {
    let mut msg = format!("task loss is {loss}; site states:");
    for s in stats {
        msg.push_str(&format!(
            " {} bits={:.4} range=[{}, {}];",
            s.name, s.mean_bits, s.act_min, s.act_max
        ));
    }
    msg
}

/// What the server reports to the client after its backward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerReport {
    pub step: usize,
    pub sites: Vec<SiteMetric>,
}

/// Running totals of an evaluation pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalAccum {
    pub nll: f64,
    pub tokens: usize,
    pub correct_tokens: usize,
    pub exact: usize,
    pub sequences: usize,
}

/// Scores of an evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub exact_match: f64,
    pub accuracy: f64,
    pub loss: f64,
}

impl EvalAccum {
    /// Adds a batch of logits `[batch, seq, vocab]`.
    pub fn add(&mut self, logits: &Tensor, targets: &[usize], batch: usize, seq: usize) {
        let v = logits.last_dim();
        let data = logits.data();
        for b in 0..batch {
            let mut all = true;
            let mut scored = false;
            for t in 0..seq {
                let tgt = targets[b * seq + t];
                if tgt == IGNORE_INDEX {
                    continue;
                }
                scored = true;
                let row = &data[(b * seq + t) * v..(b * seq + t + 1) * v];
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &x| a.max(x)) as f64;
                let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
                self.nll += lse - row[tgt] as f64;
                self.tokens += 1;
                // ties resolve to the lowest index
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f32::NEG_INFINITY),
                        |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
                    )
                    .0;
                if arg == tgt {
                    self.correct_tokens += 1;
                } else {
                    all = false;
                }
            }
            if scored {
                self.sequences += 1;
                self.exact += usize::from(all);
            }
        }
    }

    pub fn report(&self) -> Result<EvalReport> {
        if self.tokens == 0 {
            return Err(Error::Invalid("evaluation saw no scored tokens".into()));
        }
        let loss = self.nll / self.tokens as f64;
        Ok(EvalReport {
            ppl: loss.exp(),
            exact_match: self.exact as f64 / self.sequences as f64,
            accuracy: self.correct_tokens as f64 / self.tokens as f64,
            loss,
        })
    }
}

fn train_ctx(samples: &[u64]) -> StepCtx<'_> {
    StepCtx { samples, train: true }
}

const EVAL_CTX: StepCtx<'static> = StepCtx {
    samples: &[],
    train: false,
};

struct ClientPending {
    step: usize,
    batch: Batch,
    front: StageOutput,
    front_stats: Vec<SiteStat>,
    back_stats: Vec<SiteStat>,
    task_loss: f64,
    bytes_tx: usize,
    bytes_rx: usize,
    started: Instant,
}

/// Holds the client front and back stages.
pub struct ClientEndpoint {
    pub cfg: RunConfig,
    pub front: ModelPartition,
    pub back: ModelPartition,
    pub ctl: BitControl,
    pub task: Task,
    schedule: Schedule,
    opt_front: Optimizer,
    opt_back: Optimizer,
    front_site: u32,
    pending: Option<ClientPending>,
    eval_batch: Option<Batch>,
}

impl ClientEndpoint {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let [front, _, back] = build_model_with_quant(&cfg.model, &cfg.quant, cfg.optim.seed)?;
        let front_site = front
            .sites()
            .iter()
            .find(|s| s.network)
            .map(|s| site_index(cfg, &s.name))
            .unwrap_or(0);
        Ok(ClientEndpoint {
            cfg: cfg.clone(),
            front,
            back,
            ctl: BitControl::new(cfg),
            task: make_task(&cfg.task)?,
            schedule: Schedule::new(cfg.optim.seed, cfg.task.train_size, cfg.optim.batch_size)?,
            opt_front: Optimizer::new(cfg.optim.optimizer),
            opt_back: Optimizer::new(cfg.optim.optimizer),
            front_site,
            pending: None,
            eval_batch: None,
        })
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    /// Runs the front stage on the step's batch; returns the FWD_ACT body.
    pub fn begin_step(&mut self, step: usize) -> Result<Vec<u8>> {
        let started = Instant::now();
        let batch = Batch::from_examples(&self.task.train, &self.schedule.batch_indices(step));
        let out = self.front.forward(
            StageInput::Tokens {
                ids: &batch.ids,
                batch: batch.batch,
                seq: batch.seq,
            },
            train_ctx(&batch.samples),
        )?;
        let payload = out.payload.as_ref().expect("front emits a payload");
        let bytes = encode_payload(payload, self.front_site, step as u32, Role::FwdAct, false)?;
        self.pending = Some(ClientPending {
            step,
            front_stats: out.stats.clone(),
            batch,
            front: out,
            back_stats: Vec::new(),
            task_loss: 0.0,
            bytes_tx: bytes.len(),
            bytes_rx: 0,
            started,
        });
        Ok(bytes)
    }

    /// Runs the back stage and its backward; returns the BWD_GRAD body.
    pub fn on_forward(&mut self, bytes: &[u8]) -> Result<Vec<u8>> {
        let p = self
            .pending
            .as_mut()
            .ok_or_else(|| Error::Protocol("FWD_ACT received outside a step".into()))?;
        let (payload, meta) = decode_payload(bytes)?;
        check_step(meta, p.step)?;
        p.bytes_rx += bytes.len();
        let mut out = self
            .back
            .forward(StageInput::Activation(&payload), train_ctx(&p.batch.samples))?;
        let loss = out.tape.cross_entropy(out.output, &p.batch.targets)?;
        let lv = out.tape.value(loss).data()[0];
        p.back_stats = out.stats.clone();
        if !lv.is_finite() {
            let all: Vec<SiteStat> = p.front_stats.iter().chain(&p.back_stats).cloned().collect();
            let msg = diagnostic(lv, &all);
            log::error!("{msg}");
            return Err(Error::Numerical(msg));
        }
        p.task_loss = lv as f64;
        let grad = self
            .back
            .backward(out, Upstream::Loss(loss), self.ctl.bits_weight())?
            .expect("back stage has an input");
        let site = meta.tensor_id & ID_MASK;
        let bytes = encode_payload(&grad, site, p.step as u32, Role::BwdGrad, false)?;
        p.bytes_tx += bytes.len();
        Ok(bytes)
    }

    /// Finishes the front backward and applies both optimizers.
    pub fn finish_step(&mut self, bytes: &[u8], server: &ServerReport) -> Result<RunMetrics> {
        let p = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol("BWD_GRAD received outside a step".into()))?;
        let (grad, meta) = decode_payload(bytes)?;
        check_step(meta, p.step)?;
        let bytes_rx = p.bytes_rx + bytes.len();
        self.front
            .backward(p.front, Upstream::Grad(&grad), self.ctl.bits_weight())?;
        for (part, opt) in [
            (&mut self.front, &mut self.opt_front),
            (&mut self.back, &mut self.opt_back),
        ] {
            if let Some(c) = self.cfg.optim.grad_clip {
                Optimizer::clip_model_grads(&mut part.params, c);
            }
            opt.step(&mut part.params, self.cfg.optim.model_lr, self.ctl.bits_lr);
        }
        let own: Vec<SiteStat> = p.front_stats.iter().chain(&p.back_stats).cloned().collect();
        self.ctl.observe(&own);
        let mut sites = site_metrics(&p.front_stats);
        sites.extend(server.sites.iter().cloned());
        sites.extend(site_metrics(&p.back_stats));
        let bits_loss = sites.iter().map(|s| s.bits_loss).sum::<f64>() / sites.len().max(1) as f64;
        Ok(RunMetrics {
            step: p.step,
            task_loss: p.task_loss,
            bits_loss,
            sites,
            bytes_tx: p.bytes_tx,
            bytes_rx,
            wall_ms: p.started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Number of evaluation batches.
    pub fn eval_batches(&self) -> usize {
        self.task.eval.len().div_ceil(self.cfg.optim.batch_size)
    }

    /// Forward of evaluation batch `k` through the front; returns FWD_ACT.
    pub fn eval_begin(&mut self, k: usize) -> Result<Vec<u8>> {
        let bs = self.cfg.optim.batch_size;
        let idx: Vec<usize> = (k * bs..((k + 1) * bs).min(self.task.eval.len())).collect();
        let batch = Batch::from_examples(&self.task.eval, &idx);
        let out = self.front.forward(
            StageInput::Tokens {
                ids: &batch.ids,
                batch: batch.batch,
                seq: batch.seq,
            },
            EVAL_CTX,
        )?;
        self.eval_batch = Some(batch);
        let payload = out.payload.as_ref().expect("front emits a payload");
        encode_payload(payload, self.front_site, k as u32, Role::FwdAct, true)
    }

    /// Scores the server's reply to [`ClientEndpoint::eval_begin`].
    pub fn eval_finish(&mut self, bytes: &[u8], acc: &mut EvalAccum) -> Result<()> {
        let batch = self
            .eval_batch
            .take()
            .ok_or_else(|| Error::Protocol("evaluation reply without a request".into()))?;
        let (payload, _) = decode_payload(bytes)?;
        let out = self.back.forward(StageInput::Activation(&payload), EVAL_CTX)?;
        let logits = out.tape.value(out.output);
        if !logits.is_finite() {
            return Err(Error::Numerical("non-finite logits during evaluation".into()));
        }
        acc.add(logits, &batch.targets, batch.batch, batch.seq);
        Ok(())
    }
}

fn check_step(meta: PackedMeta, step: usize) -> Result<()> {
    if meta.step as usize != step {
        return Err(Error::Protocol(format!("expected step {step}, got {}", meta.step)));
    }
    Ok(())
}

struct ServerPending {
    step: usize,
    out: StageOutput,
    stats: Vec<SiteStat>,
}

/// Holds the server middle stage.
pub struct ServerEndpoint {
    pub cfg: RunConfig,
    pub middle: ModelPartition,
    pub ctl: BitControl,
    schedule: Schedule,
    opt: Optimizer,
    out_site: u32,
    pending: Option<ServerPending>,
}

impl ServerEndpoint {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let [_, middle, _] = build_model_with_quant(&cfg.model, &cfg.quant, cfg.optim.seed)?;
        let out_site = middle
            .sites()
            .iter()
            .find(|s| s.network)
            .map(|s| site_index(cfg, &s.name))
            .unwrap_or(0);
        Ok(ServerEndpoint {
            cfg: cfg.clone(),
            middle,
            ctl: BitControl::new(cfg),
            schedule: Schedule::new(cfg.optim.seed, cfg.task.train_size, cfg.optim.batch_size)?,
            opt: Optimizer::new(cfg.optim.optimizer),
            out_site,
            pending: None,
        })
    }

    /// Runs the middle stage; returns the FWD_ACT body for the client back.
    pub fn on_forward(&mut self, bytes: &[u8]) -> Result<Vec<u8>> {
        let (payload, meta) = decode_payload(bytes)?;
        let eval = meta.tensor_id & ID_EVAL != 0;
        if eval {
            let out = self.middle.forward(StageInput::Activation(&payload), EVAL_CTX)?;
            let p = out.payload.as_ref().expect("middle emits a payload");
            return encode_payload(p, self.out_site, meta.step, Role::FwdAct, true);
        }
        let step = meta.step as usize;
        let samples: Vec<u64> = self.schedule.batch_indices(step).iter().map(|&i| i as u64).collect();
        if payload.shape().first() != Some(&samples.len()) {
            return Err(Error::Protocol(format!(
                "activation batch {:?} does not match the schedule's {} rows",
                payload.shape(),
                samples.len()
            )));
        }
        let out = self
            .middle
            .forward(StageInput::Activation(&payload), train_ctx(&samples))?;
        let p = out.payload.as_ref().expect("middle emits a payload");
        let reply = encode_payload(p, self.out_site, meta.step, Role::FwdAct, false)?;
        self.pending = Some(ServerPending {
            step,
            stats: out.stats.clone(),
            out,
        });
        Ok(reply)
    }

    /// Backpropagates the middle stage and steps its optimizer; returns the
    /// BWD_GRAD body and the report for the METRICS frame.
    pub fn on_backward(&mut self, bytes: &[u8]) -> Result<(Vec<u8>, ServerReport)> {
        let p = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol("BWD_GRAD received outside a step".into()))?;
        let (grad, meta) = decode_payload(bytes)?;
        check_step(meta, p.step)?;
        let up = self
            .middle
            .backward(p.out, Upstream::Grad(&grad), self.ctl.bits_weight())?
            .expect("middle stage has an input");
        let site = self
            .middle
            .inbound_site()
            .map(|s| site_index(&self.cfg, &s.name))
            .unwrap_or(0);
        let reply = encode_payload(&up, site, meta.step, Role::BwdGrad, false)?;
        if let Some(c) = self.cfg.optim.grad_clip {
            Optimizer::clip_model_grads(&mut self.middle.params, c);
        }
        self.opt
            .step(&mut self.middle.params, self.cfg.optim.model_lr, self.ctl.bits_lr);
        self.ctl.observe(&p.stats);
        Ok((
            reply,
            ServerReport {
                step: p.step,
                sites: site_metrics(&p.stats),
            },
        ))
    }

    /// Trainable middle weights for the end-of-session sync.
    pub fn trainable(&self) -> Vec<(u32, Tensor)> {
        self.middle
            .params
            .iter()
            .filter(|(_, p)| p.requires_grad)
            .map(|(id, p)| (id.index() as u32, p.value.clone()))
            .collect()
    }
}

/// Copies synced middle weights into a local copy of the middle stage.
pub fn apply_sync(middle: &mut ModelPartition, weights: &[(u32, Tensor)]) -> Result<()> {
    let ids: Vec<_> = middle.params.iter().map(|(id, _)| id).collect();
    for (i, t) in weights {
        let id = *ids
            .get(*i as usize)
            .ok_or_else(|| Error::Protocol(format!("synced tensor {i} has no matching parameter")))?;
        let p = middle.params.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::shape("sync", p.value.shape(), t.shape()));
        }
        p.value = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_vocab_ppl() {
        let logits = Tensor::zeros(&[2, 3, 16]);
        let mut acc = EvalAccum::default();
        acc.add(&logits, &[1, 2, 3, IGNORE_INDEX, 5, 6], 2, 3);
        let r = acc.report().unwrap();
        assert!((r.ppl - 16.0).abs() < 1e-9);
        assert_eq!(acc.tokens, 5);
    }

    #[test]
    fn perfect_predictions_are_exact() {
        let mut data = vec![0.0; 2 * 4];
        data[1] = 5.0;
        data[4 + 3] = 5.0;
        let logits = Tensor::new(vec![1, 2, 4], data).unwrap();
        let mut acc = EvalAccum::default();
        acc.add(&logits, &[1, 3], 1, 2);
        let r = acc.report().unwrap();
        assert_eq!(r.exact_match, 1.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn empty_eval_is_an_error() {
        assert!(EvalAccum::default().report().is_err());
    }
}
