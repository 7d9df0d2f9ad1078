//! AdamW and SGD over a parameter store, with one learning rate per group.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Adamw {
        #[serde(default = "d_beta1")]
        beta1: f64,
        #[serde(default = "d_beta2")]
        beta2: f64,
        #[serde(default = "d_eps")]
        eps: f64,
        /// Applied to the model group only.
        #[serde(default)]
        weight_decay: f64,
    },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adamw {
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: 0.0,
        }
    }
}

/// Multiplies the gating learning rate and the regularizer weight by
/// `factor` once every site of an endpoint has reached its target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecaySchedule {
    pub factor: f64,
}

fn d_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub model_lr: f64,
    pub bits_lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Global-norm clip on the model group; `null` disables it.
    #[serde(default = "d_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub schedule: Option<DecaySchedule>,
}

impl OptimConfig {
    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.bits_lr > 0.0) {
            return bad(format!("optim.bits_lr must be > 0, got {}", self.bits_lr));
        }
        if !(self.model_lr >= 0.0) {
            return bad(format!("optim.model_lr must be >= 0, got {}", self.model_lr));
        }
        if self.batch_size == 0 {
            return bad("optim.batch_size must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("optim.grad_clip must be > 0, got {c}"));
            }
        }
        if let Some(s) = self.schedule {
            if !(s.factor > 0.0 && s.factor <= 1.0) {
                return bad(format!("optim.schedule.factor must be in (0, 1], got {}", s.factor));
            }
        }
        if let OptimizerKind::Adamw {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) || weight_decay < 0.0 {
                return bad("optim.optimizer: need 0 <= beta1, beta2 < 1, eps > 0, weight_decay >= 0".into());
            }
        }
        Ok(())
    }
}

/// Optimizer state for one parameter store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Scales model-group gradients so their joint L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_model_grads(store: &mut ParamStore, max_norm: f64) -> f64 {
        let norm = store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Model)
            .filter_map(|(_, p)| p.grad.as_ref())
            .map(|g| g.sq_norm())
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let s = (max_norm / norm) as f32;
            for (_, p) in store.iter_mut() {
                if p.group == ParamGroup::Model {
                    if let Some(g) = p.grad.as_mut() {
                        g.data_mut().iter_mut().for_each(|x| *x *= s);
                    }
                }
            }
        }
        norm
    }

    /// Applies one update and clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore, model_lr: f64, bits_lr: f64) {
        self.t += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        for (id, p) in store.iter_mut() {
            let Some(g) = p.grad.as_ref() else { continue };
            let lr = match p.group {
                ParamGroup::Model => model_lr,
                ParamGroup::Gating => bits_lr,
            };
            let w = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, &gi) in w.iter_mut().zip(g.data()) {
                        *x -= (lr * gi as f64) as f32;
                    }
                }
                OptimizerKind::Adamw {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let i = id.index();
                    if self.m[i].is_empty() {
                        self.m[i] = vec![0.0; w.len()];
                        self.v[i] = vec![0.0; w.len()];
                    }
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    // gating logits never decay: that would pull bit-widths down on its own
                    let wd = if p.group == ParamGroup::Model {
                        weight_decay
                    } else {
                        0.0
                    };
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (k, (x, &gi)) in w.iter_mut().zip(g.data()).enumerate() {
                        let gi = gi as f64;
                        let mk = beta1 * m[k] as f64 + (1.0 - beta1) * gi;
                        let vk = beta2 * v[k] as f64 + (1.0 - beta2) * gi * gi;
                        m[k] = mk as f32;
                        v[k] = vk as f32;
                        let upd = (mk / c1) / ((vk / c2).sqrt() + eps) + wd * *x as f64;
                        *x = (*x as f64 - lr * upd) as f32;
                    }
                }
            }
        }
        store.zero_grad();
    }
}
