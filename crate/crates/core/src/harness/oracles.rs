//! Gradient oracle suite behind `amaq grad-check`.
//!
//! Three families of checks:
//!
//! - `builtin_fd`: every built-in tape op against central differences.
//! - `amaq_chain`: the learnable quantizer's gate gradient and the bit
//!   regularizer against closed forms written out here in f64, plus a
//!   finite-difference check of the gate gradient with quantization indices
//!   held fixed.
//! - `ste_identity`: straight-through ops pass the upstream gradient unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check, random_tensor, Builder};
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::quant::gating::bits_grad;
use crate::quant::{
    amaq_fake_quant, amaq_quant, bits_loss_var, grad_quant, ste, step_size_grad, ClipMode, FakeQuantResult,
    GatingParams, Granularity, QuantAxis, UnitLayout,
};

pub const BUILTIN_REL_TOL: f64 = 1e-3;
pub const CLOSED_FORM_ABS_TOL: f64 = 1e-6;
pub const FROZEN_FD_REL_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub suite: &'static str,
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

/// Runs all three families.
pub fn run_oracle_suite(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut out = builtin_fd(seed)?;
    out.extend(amaq_chain(seed)?);
    out.extend(ste_identity(seed)?);
    Ok(out)
}

fn fd(name: &str, inputs: Vec<Tensor>, build: &Builder, eps: f32, seed: u64) -> Result<OracleCheck> {
    let r = check(name, &inputs, build, eps, BUILTIN_REL_TOL, seed)?;
    Ok(OracleCheck {
        suite: "builtin_fd",
        name: name.to_string(),
        error: r.rel_err,
        tolerance: BUILTIN_REL_TOL,
    })
}

pub fn builtin_fd(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| random_tensor(shape, 1.0, &mut rng);
    let eps = 1e-2;
    let targets = [2usize, 0, 4, 1, 3, 3];
    let ids = [3usize, 0, 2, 2, 1, 4];
    Ok(vec![
        fd("add", vec![t(&[3, 4]), t(&[4])], &|tp, v| tp.add(v[0], v[1]), eps, seed)?,
        fd(
            "mul",
            vec![t(&[3, 4]), t(&[3, 4])],
            &|tp, v| tp.mul(v[0], v[1]),
            eps,
            seed,
        )?,
        fd("scale", vec![t(&[5])], &|tp, v| Ok(tp.scale(v[0], -1.5)), eps, seed)?,
        fd(
            "matmul",
            vec![t(&[3, 4]), t(&[4, 2])],
            &|tp, v| tp.matmul(v[0], v[1]),
            eps,
            seed,
        )?,
        fd(
            "batched_matmul",
            vec![t(&[2, 3, 4]), t(&[2, 4, 2])],
            &|tp, v| tp.matmul(v[0], v[1]),
            eps,
            seed,
        )?,
        fd("gelu", vec![t(&[2, 5])], &|tp, v| Ok(tp.gelu(v[0])), eps, seed)?,
        fd("softmax", vec![t(&[3, 5])], &|tp, v| Ok(tp.softmax(v[0])), eps, seed)?,
        fd(
            "causal_softmax",
            vec![t(&[2, 4, 4])],
            &|tp, v| tp.causal_softmax(v[0]),
            eps,
            seed,
        )?,
        fd(
            "layer_norm",
            vec![t(&[3, 6]), t(&[6]), t(&[6])],
            &|tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-5),
            eps / 4.0,
            seed,
        )?,
        fd(
            "embedding",
            vec![t(&[5, 3])],
            &|tp, v| tp.embedding(v[0], &ids, &[2, 3]),
            eps,
            seed,
        )?,
        fd(
            "cross_entropy",
            vec![t(&[6, 5])],
            &|tp, v| tp.cross_entropy(v[0], &targets),
            eps,
            seed,
        )?,
        fd(
            "transpose",
            vec![t(&[2, 3, 4])],
            &|tp, v| tp.transpose(v[0], 1, 2),
            eps,
            seed,
        )?,
        fd(
            "reshape",
            vec![t(&[2, 6])],
            &|tp, v| tp.reshape(v[0], &[3, 4]),
            eps,
            seed,
        )?,
        fd(
            "slice",
            vec![t(&[2, 5, 3])],
            &|tp, v| tp.slice(v[0], 1, 1, 4),
            eps,
            seed,
        )?,
    ])
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reference gate gradient, recomputing everything but the rounding
/// decisions (`indices`, `zmin`, `zmax`) from scratch in f64.
fn reference_dq(
    x: &Tensor,
    gp: &GatingParams,
    layout: UnitLayout,
    indices: &[u32],
    zmin: &[f32],
    zmax: &[f32],
    g: &Tensor,
) -> Vec<f64> {
    let span = gp.b_max - gp.b_min;
    let a = gp.alpha as f64;
    let mut dq = vec![0.0; gp.q.len()];
    for (u, out) in dq.iter_mut().enumerate() {
        let z = a * gp.q[u] as f64;
        let b = gp.b_min + span * sig(z);
        let levels = 2f64.powf(b) - 1.0;
        let range = zmax[u] as f64 - zmin[u] as f64;
        if range == 0.0 {
            continue;
        }
        let step = range / levels;
        let dstep_db = -range * std::f64::consts::LN_2 * 2f64.powf(b) / (levels * levels);
        let db_dq = span * a * sig(z) * (1.0 - sig(z));
        let mut acc = 0.0;
        for (i, ((&xi, &gi), &n)) in x.data().iter().zip(g.data()).zip(indices).enumerate() {
            if layout.unit_of(i) == u {
                let v = (xi as f64 - zmin[u] as f64) / step;
                acc += gi as f64 * (n as f64 - v);
            }
        }
        *out = acc * dstep_db * db_dq;
    }
    dq
}

/// `sum_i g_i * c_i * step_u(b(q))`: the quantizer with each element's
/// step multiplier `c_i` held fixed.
fn frozen_objective(
    q: &[f64],
    gp: &GatingParams,
    layout: UnitLayout,
    coef: &[f64],
    zmin: &[f32],
    zmax: &[f32],
    g: &Tensor,
) -> f64 {
    let span = gp.b_max - gp.b_min;
    let mut f = 0.0;
    for (i, (&gi, &c)) in g.data().iter().zip(coef).enumerate() {
        let u = layout.unit_of(i);
        let b = gp.b_min + span * sig(gp.alpha as f64 * q[u]);
        let step = (zmax[u] as f64 - zmin[u] as f64) / (2f64.powf(b) - 1.0);
        f += gi as f64 * c * step;
    }
    f
}

/// Central differences of `frozen_objective` against `analytic`, as a
/// relative error over the gate.
fn frozen_fd(
    gp: &GatingParams,
    layout: UnitLayout,
    coef: &[f64],
    res: &FakeQuantResult,
    g: &Tensor,
    analytic: &[f64],
) -> f64 {
    let q64: Vec<f64> = gp.q.iter().map(|&v| v as f64).collect();
    let h = 1e-5;
    let mut diff_sq = 0.0;
    let mut ref_sq = 0.0;
    for u in 0..q64.len() {
        let mut p = q64.clone();
        p[u] += h;
        let mut m = q64.clone();
        m[u] -= h;
        let num = (frozen_objective(&p, gp, layout, coef, &res.zmin, &res.zmax, g)
            - frozen_objective(&m, gp, layout, coef, &res.zmin, &res.zmax, g))
            / (2.0 * h);
        diff_sq += (num - analytic[u]).powi(2);
        ref_sq += num * num;
    }
    diff_sq.sqrt() / ref_sq.sqrt().max(1e-12)
}

fn gate(rng: &mut ChaCha8Rng, len: usize, axis: QuantAxis, clip: ClipMode) -> GatingParams {
    GatingParams {
        q: (0..len).map(|_| rng.gen_range(-1.5f32..1.5)).collect(),
        alpha: 1.0,
        b_min: 1.0,
        b_max: 16.0,
        target_bits: 4.0,
        axis,
        clip,
    }
}

fn max_abs(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - *y as f64).abs()).fold(0.0, f64::max)
}

fn check_gate(name: &str, rng: &mut ChaCha8Rng, shape: &[usize], axis: QuantAxis) -> Result<Vec<OracleCheck>> {
    let x = random_tensor(shape, 1.0, rng);
    let g = random_tensor(shape, 1.0, rng);
    let units = match axis {
        QuantAxis::Channel => shape[shape.len() - 1],
        QuantAxis::Token => shape[shape.len() - 2],
    };
    let gp = gate(rng, units, axis, ClipMode::MeanGate);
    let layout = UnitLayout::new(shape, Granularity::Channel, axis)?;

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let qv = tape.leaf(Tensor::from_vec(gp.q.clone()), true);
    let (out, res) = amaq_quant(&mut tape, xv, qv, &gp)?;
    let grads = tape.backward_seeded(&[(out, g.clone())], &mut ParamStore::new())?;
    let dq = grads.get(qv).expect("gate gradient").data().to_vec();

    let expect = reference_dq(&x, &gp, layout, &res.indices, &res.zmin, &res.zmax, &g);
    let closed = OracleCheck {
        suite: "amaq_chain",
        name: format!("{name}_closed_form"),
        error: max_abs(&expect, &dq),
        tolerance: CLOSED_FORM_ABS_TOL,
    };

    // x_hat = zmin + n * step with n frozen: d/dq = sum g * n * dstep/db * db/dq
    let db_dq = bits_grad(&gp);
    let mut through_step = vec![0.0; units];
    for i in 0..x.numel() {
        let u = layout.unit_of(i);
        through_step[u] += g.data()[i] as f64
            * res.indices[i] as f64
            * step_size_grad(res.zmin[u], res.zmax[u], res.bits[u])
            * db_dq[u];
    }
    let n: Vec<f64> = res.indices.iter().map(|&n| n as f64).collect();
    let frozen_n = OracleCheck {
        suite: "amaq_chain",
        name: format!("{name}_frozen_index_fd"),
        error: frozen_fd(&gp, layout, &n, &res, &g, &through_step),
        tolerance: FROZEN_FD_REL_TOL,
    };
    // x_hat = x + step * (n - v) with the residual frozen is the surrogate
    // the backward differentiates
    let r: Vec<f64> = res.residual.iter().map(|&r| r as f64).collect();
    let dq64: Vec<f64> = dq.iter().map(|&v| v as f64).collect();
    let frozen_r = OracleCheck {
        suite: "amaq_chain",
        name: format!("{name}_frozen_residual_fd"),
        error: frozen_fd(&gp, layout, &r, &res, &g, &dq64),
        tolerance: FROZEN_FD_REL_TOL,
    };
    Ok(vec![closed, frozen_n, frozen_r])
}

fn check_bits_loss(rng: &mut ChaCha8Rng, clip: ClipMode) -> Result<OracleCheck> {
    let mut gp = gate(rng, 6, QuantAxis::Channel, clip);
    // spread channels across the target so each clip rule has work to do
    gp.q[0] = -3.0;
    gp.q[1] = 2.5;
    let mut tape = Tape::new();
    let qv = tape.leaf(Tensor::from_vec(gp.q.clone()), true);
    let loss = bits_loss_var(&mut tape, qv, &gp)?;
    let grads = tape.backward(loss, &mut ParamStore::new())?;
    let dq = grads
        .get(qv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; gp.q.len()]);

    let n = gp.q.len() as f64;
    let span = gp.b_max - gp.b_min;
    let mean_bits: f64 = gp.q.iter().map(|&q| gp.b_min + span * sig(q as f64)).sum::<f64>() / n;
    let q_floor = (((gp.target_bits - gp.b_min) / span) / (1.0 - (gp.target_bits - gp.b_min) / span)).ln();
    let expect: Vec<f64> =
        gp.q.iter()
            .map(|&q| {
                let q = q as f64;
                let stopped = match clip {
                    ClipMode::Off => false,
                    ClipMode::MeanGate => mean_bits <= gp.target_bits,
                    ClipMode::PerChannel => q < q_floor,
                };
                if stopped {
                    0.0
                } else {
                    2.0 / n * sig(q) * sig(q) * (1.0 - sig(q))
                }
            })
            .collect();
    Ok(OracleCheck {
        suite: "amaq_chain",
        name: format!("bits_loss_{clip:?}").to_lowercase(),
        error: max_abs(&expect, &dq),
        tolerance: CLOSED_FORM_ABS_TOL,
    })
}

pub fn amaq_chain(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = check_gate("gate_channel", &mut rng, &[2, 5, 4], QuantAxis::Channel)?;
    out.extend(check_gate("gate_token", &mut rng, &[2, 5, 4], QuantAxis::Token)?);
    for clip in [ClipMode::Off, ClipMode::MeanGate, ClipMode::PerChannel] {
        out.push(check_bits_loss(&mut rng, clip)?);
    }
    Ok(out)
}

fn identity_error(name: &str, g: &Tensor, got: Option<&Tensor>) -> OracleCheck {
    let error = match got {
        Some(t) => g
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max),
        None => f64::INFINITY,
    };
    OracleCheck {
        suite: "ste_identity",
        name: name.to_string(),
        error,
        tolerance: 0.0,
    }
}

pub fn ste_identity(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57e);
    let x = random_tensor(&[3, 4], 1.0, &mut rng);
    let g = random_tensor(&[3, 4], 1.0, &mut rng);
    let mut out = Vec::new();

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = ste(&mut tape, xv, x.map(|v| (v * 4.0).round() / 4.0))?;
    let grads = tape.backward_seeded(&[(y, g.clone())], &mut ParamStore::new())?;
    out.push(identity_error("ste", &g, grads.get(xv)));

    let gp = gate(&mut rng, 4, QuantAxis::Channel, ClipMode::MeanGate);
    amaq_fake_quant(&x, &gp)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let qv: Var = tape.leaf(Tensor::from_vec(gp.q.clone()), true);
    let (y, _) = amaq_quant(&mut tape, xv, qv, &gp)?;
    let grads = tape.backward_seeded(&[(y, g.clone())], &mut ParamStore::new())?;
    out.push(identity_error("amaq_input", &g, grads.get(xv)));

    let layout = UnitLayout::new(x.shape(), Granularity::Tensor, QuantAxis::Channel)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = grad_quant(&mut tape, xv, vec![4.0], layout);
    out.push(identity_error("grad_quant_forward", &x, Some(tape.value(y))));
    Ok(out)
}
