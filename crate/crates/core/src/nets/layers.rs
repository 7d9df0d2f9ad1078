//! Building blocks: linear layers with optional low-rank adapters, the
//! embedding, transformer and MLP layers, and the output head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::{Arch, ModelConfig, Tuning};

const LN_EPS: f32 = 1e-5;

/// Low-rank update `scaling * (x A) B` with `A: [in, r]`, `B: [r, out]`.
#[derive(Clone, Copy, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub scaling: f32,
}

/// `y = x W + bias`, weights stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub lora: Option<LoraAdapter>,
}

/// `x w + scaling * (x a) b` on tape nodes.
pub fn lora_forward(tape: &mut Tape, x: Var, w: Var, a: Var, b: Var, scaling: f32) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    let xa = tape.matmul(x, a)?;
    let xab = tape.matmul(xa, b)?;
    let upd = tape.scale(xab, scaling);
    tape.add(base, upd)
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = match self.lora {
            Some(l) => {
                let a = tape.param(store, l.a);
                let b = tape.param(store, l.b);
                lora_forward(tape, x, w, a, b, l.scaling)?
            }
            None => tape.matmul(x, w)?,
        };
        let bias = tape.param(store, self.bias);
        tape.add(y, bias)
    }
}

/// Parameter factory walking one RNG in a fixed global order.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub tuning: Tuning,
}

impl Init<'_> {
    fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("positive std");
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(self.rng)).collect()).expect("numel")
    }

    /// Base weights train only under full tuning.
    fn base(&mut self, name: String, value: Tensor) -> ParamId {
        let train = self.tuning == Tuning::Full;
        self.store.add(name, value, train, ParamGroup::Model)
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, out_scale: f32, adapted: bool) -> Linear {
        let w = self.normal(&[d_in, d_out], out_scale / (d_in as f32).sqrt());
        let weight = self.base(format!("{name}.weight"), w);
        let bias = self.base(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        let lora = match self.tuning {
            Tuning::Lora { rank, lora_alpha } if adapted => {
                let bound = 1.0 / (d_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let a: Vec<f32> = (0..d_in * rank).map(|_| self.rng.sample(dist)).collect();
                let a = self.store.add(
                    format!("{name}.lora_a"),
                    Tensor::new(vec![d_in, rank], a).expect("numel"),
                    true,
                    ParamGroup::Model,
                );
                let b = self.store.add(
                    format!("{name}.lora_b"),
                    Tensor::zeros(&[rank, d_out]),
                    true,
                    ParamGroup::Model,
                );
                Some(LoraAdapter {
                    a,
                    b,
                    scaling: lora_alpha / rank as f32,
                })
            }
            _ => None,
        };
        Linear { weight, bias, lora }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.base(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: self.base(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Embed {
    tok: ParamId,
    pos: ParamId,
    vocab: usize,
    max_seq_len: usize,
}

impl Embed {
    /// `ids` is row-major `[batch, seq]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], batch: usize, seq: usize) -> Result<Var> {
        if seq > self.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.max_seq_len
            )));
        }
        if ids.len() != batch * seq {
            return Err(Error::shape("embed", &[ids.len()], &[batch, seq]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Invalid(format!(
                "token id {bad} out of range for vocab {}",
                self.vocab
            )));
        }
        let tok = tape.param(store, self.tok);
        let pos = tape.param(store, self.pos);
        let te = tape.embedding(tok, ids, &[batch, seq])?;
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pe = tape.embedding(pos, &pos_ids, &[batch, seq])?;
        tape.add(te, pe)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn split_heads(&self, tape: &mut Tape, x: Var, b: usize, t: usize, d: usize) -> Result<Var> {
        let dh = d / self.heads;
        let x = tape.reshape(x, &[b, t, self.heads, dh])?;
        let x = tape.transpose(x, 1, 2)?;
        tape.reshape(x, &[b * self.heads, t, dh])
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let q = self.split_heads(tape, q, b, t, d)?;
        let k = self.split_heads(tape, k, b, t, d)?;
        let v = self.split_heads(tape, v, b, t, d)?;
        let kt = tape.transpose(k, 1, 2)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
        let p = tape.causal_softmax(scores)?;
        let ctx = tape.matmul(p, v)?;
        let ctx = tape.reshape(ctx, &[b, self.heads, t, dh])?;
        let ctx = tape.transpose(ctx, 1, 2)?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        self.o.forward(tape, store, ctx)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    ff1: Linear,
    ff2: Linear,
}

impl FeedForward {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ff1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.ff2.forward(tape, store, h)
    }
}

/// Pre-norm residual layer; the attention half is absent for the MLP arch.
#[derive(Clone, Debug)]
pub(crate) struct Layer {
    attn: Option<(Norm, Attention)>,
    ln: Norm,
    ff: FeedForward,
}

impl Layer {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some((ln, attn)) = &self.attn {
            let n = ln.forward(tape, store, h)?;
            let a = attn.forward(tape, store, n)?;
            h = tape.add(h, a)?;
        }
        let n = self.ln.forward(tape, store, h)?;
        let f = self.ff.forward(tape, store, n)?;
        tape.add(h, f)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Head {
    ln: Norm,
    out: Linear,
}

impl Head {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = self.ln.forward(tape, store, x)?;
        self.out.forward(tape, store, n)
    }
}

impl Init<'_> {
    pub fn embed(&mut self, name: &str, cfg: &ModelConfig) -> Embed {
        let tok = self.normal(&[cfg.vocab_size, cfg.d_model], 1.0);
        let pos = self.normal(&[cfg.max_seq_len, cfg.d_model], 0.1);
        Embed {
            tok: self.base(format!("{name}.tok"), tok),
            pos: self.base(format!("{name}.pos"), pos),
            vocab: cfg.vocab_size,
            max_seq_len: cfg.max_seq_len,
        }
    }

    pub fn layer(&mut self, name: &str, cfg: &ModelConfig) -> Layer {
        let d = cfg.d_model;
        let ff = d * cfg.ff_mult;
        // residual branches are damped so depth does not inflate activations
        let res = 1.0 / (2.0 * cfg.n_layers.max(1) as f32).sqrt();
        let attn = match cfg.arch {
            Arch::Transformer => {
                let ln = self.norm(&format!("{name}.ln_attn"), d);
                let attn = Attention {
                    q: self.linear(&format!("{name}.attn.q"), d, d, 1.0, true),
                    k: self.linear(&format!("{name}.attn.k"), d, d, 1.0, true),
                    v: self.linear(&format!("{name}.attn.v"), d, d, 1.0, true),
                    o: self.linear(&format!("{name}.attn.o"), d, d, res, true),
                    heads: cfg.n_heads,
                };
                Some((ln, attn))
            }
            Arch::Mlp => None,
        };
        let ln = self.norm(&format!("{name}.ln_ff"), d);
        let ff = FeedForward {
            ff1: self.linear(&format!("{name}.ff1"), d, ff, 1.0, true),
            ff2: self.linear(&format!("{name}.ff2"), ff, d, res, true),
        };
        Layer { attn, ln, ff }
    }

    pub fn head(&mut self, name: &str, cfg: &ModelConfig) -> Head {
        Head {
            ln: self.norm(&format!("{name}.ln_f"), cfg.d_model),
            out: self.linear(&format!("{name}.out"), cfg.d_model, cfg.vocab_size, 1.0, false),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    #[test]
    fn zero_b_gives_base_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap(),
            false,
        );
        let w = tape.leaf(Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap(), false);
        let a = tape.leaf(Tensor::full(&[3, 2], 0.7), false);
        let b = tape.leaf(Tensor::zeros(&[2, 2]), false);
        let y = lora_forward(&mut tape, x, w, a, b, 4.0).unwrap();
        let base = tape.matmul(x, w).unwrap();
        assert_eq!(tape.value(y), tape.value(base));
    }

    #[test]
    fn identity_adapter_adds_input() {
        let mut tape = Tape::new();
        let xv = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let x = tape.leaf(xv.clone(), false);
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap(), false);
        let a = tape.leaf(eye.clone(), false);
        let b = tape.leaf(eye, false);
        let y = lora_forward(&mut tape, x, w, a, b, 1.0).unwrap();
        let base = tape.matmul(x, w).unwrap();
        let want: Vec<f32> = tape
            .value(base)
            .data()
            .iter()
            .zip(xv.data())
            .map(|(p, q)| p + q)
            .collect();
        assert_eq!(tape.value(y).data(), want.as_slice());
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let inputs = vec![
            gradcheck::random_tensor(&[3, 4], 1.0, &mut rng),
            gradcheck::random_tensor(&[4, 2], 1.0, &mut rng),
            gradcheck::random_tensor(&[2, 5], 1.0, &mut rng),
        ];
        let w = gradcheck::random_tensor(&[4, 5], 1.0, &mut rng);
        let report = gradcheck::check(
            "lora",
            &inputs,
            &move |tape, v| {
                let wv = tape.leaf(w.clone(), false);
                lora_forward(tape, v[0], wv, v[1], v[2], 0.5)
            },
            1e-3,
            1e-3,
            11,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
