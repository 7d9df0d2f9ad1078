//! Learnable mixed-bit quantizer and the straight-through tape ops.
//!
//! Forward is plain per-unit fake quantization at the gate's effective
//! bit-widths. Backward passes the upstream gradient to `x` unchanged and
//! routes a gradient to the gate logits through the step size:
//!
//! ```text
//! d x_hat / d delta = n - v
//! d delta / d b     = -(zmax - zmin) * ln2 * 2^b / s^2
//! d b / d q         = (b_max - b_min) * alpha * sigmoid'(alpha * q)
//! ```
//!
//! The range bounds are batch statistics and receive no gradient.

use std::f64::consts::LN_2;

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::fake::{fake_quant, FakeQuantResult, UnitLayout};
use super::gating::{bits_grad, effective_bits, GatingParams};
use super::Granularity;

/// `d delta / d b` for one unit.
pub fn step_size_grad(zmin: f32, zmax: f32, bits: f64) -> f64 {
    let range = (zmax - zmin) as f64;
    if range == 0.0 {
        return 0.0;
    }
    let p = bits.exp2();
    let s = p - 1.0;
    -range * LN_2 * p / (s * s)
}

/// Forward of the learnable quantizer.
pub fn amaq_fake_quant(x: &Tensor, gp: &GatingParams) -> Result<FakeQuantResult> {
    let layout = UnitLayout::new(x.shape(), Granularity::Channel, gp.axis)?;
    if layout.units != gp.q.len() {
        return Err(Error::Invalid(format!(
            "quantized axis has {} entries but the gate has {}",
            layout.units,
            gp.q.len()
        )));
    }
    fake_quant(x, &effective_bits(gp), layout)
}

/// Gradients of the learnable quantizer: `(d/dx, d/dq)`.
pub fn amaq_backward(res: &FakeQuantResult, gp: &GatingParams, grad: &Tensor) -> (Tensor, Vec<f32>) {
    let mut per_unit = vec![0.0f64; res.layout.units];
    for (i, (&g, &r)) in grad.data().iter().zip(&res.residual).enumerate() {
        per_unit[res.layout.unit_of(i)] += g as f64 * r as f64;
    }
    let db_dq = bits_grad(gp);
    let dq = per_unit
        .iter()
        .enumerate()
        .map(|(u, &s)| (s * step_size_grad(res.zmin[u], res.zmax[u], res.bits[u]) * db_dq[u]) as f32)
        .collect();
    (grad.clone(), dq)
}

struct AmaqOp {
    result: FakeQuantResult,
    gating: GatingParams,
}

impl CustomOp for AmaqOp {
    fn name(&self) -> &str {
        "amaq_quant"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (dx, dq) = amaq_backward(&self.result, &self.gating, grad);
        Ok(vec![dx, Tensor::new(inputs[1].shape().to_vec(), dq)?])
    }
}

/// Records the learnable quantizer on the tape. `q` must be the tape node
/// holding `gp.q`. Returns the output node and the forward result.
pub fn amaq_quant(tape: &mut Tape, x: Var, q: Var, gp: &GatingParams) -> Result<(Var, FakeQuantResult)> {
    if tape.value(q).data() != gp.q.as_slice() {
        return Err(Error::Invalid(
            "amaq_quant: tape value differs from gating params".into(),
        ));
    }
    let result = amaq_fake_quant(tape.value(x), gp)?;
    let out = result.x_hat.clone();
    let op = AmaqOp {
        result: result.clone(),
        gating: gp.clone(),
    };
    Ok((tape.custom(Box::new(op), &[x, q], out), result))
}

struct StraightThrough;

impl CustomOp for StraightThrough {
    fn name(&self) -> &str {
        "ste_quant"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![grad.clone()])
    }
}

/// Records `value` as the output of a quantizer applied to `x` with an
/// identity backward.
pub fn ste(tape: &mut Tape, x: Var, value: Tensor) -> Result<Var> {
    if tape.shape(x) != value.shape() {
        return Err(Error::shape("ste", tape.shape(x), value.shape()));
    }
    Ok(tape.custom(Box::new(StraightThrough), &[x], value))
}

struct GradQuant {
    bits: Vec<f64>,
    layout: UnitLayout,
}

impl CustomOp for GradQuant {
    fn name(&self) -> &str {
        "grad_quant"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![fake_quant(grad, &self.bits, self.layout)?.x_hat])
    }
}

/// Identity forward; backward fake-quantizes the incoming gradient.
pub fn grad_quant(tape: &mut Tape, x: Var, bits: Vec<f64>, layout: UnitLayout) -> Var {
    let value = tape.value(x).clone();
    tape.custom(Box::new(GradQuant { bits, layout }), &[x], value)
}
