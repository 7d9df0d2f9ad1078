//! Learnable bit-width gate and the bit regularizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::QuantAxis;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// How the bit regularizer is switched off once the target is reached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Regularize forever.
    Off,
    /// Stop the regularizer gradient while the site's mean bit-width is at
    /// or below target; channels keep their relative differences.
    #[default]
    MeanGate,
    /// Clip each logit at the target's logit, so every channel stops at target.
    PerChannel,
}

/// Per-site gate parameters: `bits_i = b_min + (b_max - b_min) * sigmoid(alpha * q_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingParams {
    pub q: Vec<f32>,
    pub alpha: f32,
    pub b_min: f64,
    pub b_max: f64,
    pub target_bits: f64,
    pub axis: QuantAxis,
    pub clip: ClipMode,
}

impl GatingParams {
    // negated so NaN alpha is rejected
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(1.0 <= self.b_min && self.b_min < self.b_max && self.b_max <= 16.0) {
            return Err(Error::Invalid(format!(
                "bit range [{}, {}] must satisfy 1 <= b_min < b_max <= 16",
                self.b_min, self.b_max
            )));
        }
        if !(self.b_min..=self.b_max).contains(&self.target_bits) {
            return Err(Error::Invalid(format!(
                "target {} outside bit range [{}, {}]",
                self.target_bits, self.b_min, self.b_max
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.q.is_empty() {
            return Err(Error::Invalid("gating vector is empty".into()));
        }
        Ok(())
    }

    pub fn clip_enabled(&self) -> bool {
        self.clip != ClipMode::Off
    }

    fn span(&self) -> f64 {
        self.b_max - self.b_min
    }

    /// Logit at which a channel sits exactly at `target_bits`.
    pub fn q_min(&self) -> f64 {
        logit((self.target_bits - self.b_min) / self.span()) / self.alpha as f64
    }

    /// Whether the mean-gate currently blocks the regularizer gradient.
    pub fn gate_active(&self) -> bool {
        self.clip == ClipMode::MeanGate && mean_bits(self) <= self.target_bits
    }
}

/// Builds a gate whose every channel starts exactly at `b_init` bits.
pub fn init_gating(b_init: f64, b_min: f64, b_max: f64, alpha: f32, len: usize) -> Result<GatingParams> {
    if !(b_min < b_init && b_init < b_max) {
        return Err(Error::Invalid(format!(
            "initial bit-width {b_init} must lie strictly inside ({b_min}, {b_max})"
        )));
    }
    let q = logit((b_init - b_min) / (b_max - b_min)) / alpha as f64;
    let gp = GatingParams {
        q: vec![q as f32; len],
        alpha,
        b_min,
        b_max,
        target_bits: b_init,
        axis: QuantAxis::Channel,
        clip: ClipMode::MeanGate,
    };
    gp.validate()?;
    Ok(gp)
}

pub fn effective_bits(gp: &GatingParams) -> Vec<f64> {
    let a = gp.alpha as f64;
    gp.q.iter()
        .map(|&q| gp.b_min + gp.span() * sigmoid(a * q as f64))
        .collect()
}

pub fn mean_bits(gp: &GatingParams) -> f64 {
    let b = effective_bits(gp);
    b.iter().sum::<f64>() / b.len() as f64
}

/// `db_i / dq_i` of the gate.
pub fn bits_grad(gp: &GatingParams) -> Vec<f64> {
    let a = gp.alpha as f64;
    gp.q.iter()
        .map(|&q| gp.span() * a * sigmoid_grad(a * q as f64))
        .collect()
}

/// `(1/n) * sum sigmoid(alpha * q_i)^2` and its gradient with the clip rule applied.
pub fn bits_loss(gp: &GatingParams) -> (f64, Vec<f64>) {
    let a = gp.alpha as f64;
    let n = gp.q.len() as f64;
    let q_min = gp.q_min();
    let gated = gp.gate_active();
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(gp.q.len());
    for &q in &gp.q {
        let q = q as f64;
        let clipped = gp.clip == ClipMode::PerChannel && q < q_min;
        let qe = if clipped { q_min } else { q };
        let s = sigmoid(a * qe);
        value += s * s;
        grad.push(if gated || clipped {
            0.0
        } else {
            2.0 / n * s * sigmoid_grad(a * qe) * a
        });
    }
    (value / n, grad)
}

struct BitsLossOp {
    grad: Vec<f64>,
}

impl CustomOp for BitsLossOp {
    fn name(&self) -> &str {
        "bits_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let g = grad.data()[0] as f64;
        let dq = self.grad.iter().map(|v| (v * g) as f32).collect();
        Ok(vec![Tensor::new(inputs[0].shape().to_vec(), dq)?])
    }
}

/// Records the bit regularizer of `gp` on the tape; `q` must hold `gp.q`.
pub fn bits_loss_var(tape: &mut Tape, q: Var, gp: &GatingParams) -> Result<Var> {
    if tape.value(q).data() != gp.q.as_slice() {
        return Err(Error::Invalid(
            "bits_loss: tape value differs from gating params".into(),
        ));
    }
    let (value, grad) = bits_loss(gp);
    Ok(tape.custom(Box::new(BitsLossOp { grad }), &[q], Tensor::scalar(value as f32)))
}
