//! Numeric kernels behind the tape ops.

use super::tape::IGNORE_INDEX;
use super::tensor::Tensor;

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip of equal shapes")
}

pub(crate) fn add_bias(a: &Tensor, bias: &Tensor) -> Tensor {
    let d = bias.numel();
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (x, b) in row.iter_mut().zip(bias.data()) {
            *x += *b;
        }
    }
    out
}

/// `[m, k] x [k, n]`.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m, n] x b[k, n]^T -> [m, k]`.
pub(crate) fn matmul_bt(g: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m, k]^T x g[m, n] -> [k, n]`.
pub(crate) fn matmul_at(a: &[f32], g: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let mut data = Vec::with_capacity(bs * m * n);
    for i in 0..bs {
        data.extend(matmul(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
        ));
    }
    Tensor::new(vec![bs, m, n], data).expect("bmm shape")
}

/// Tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn softmax(x: &Tensor, causal: bool) -> Tensor {
    let d = x.last_dim();
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let valid = if causal { r % d + 1 } else { d };
        let max = row[..valid].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row[..valid].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..valid].iter_mut() {
            *v /= sum;
        }
        row[valid..].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let d = y.last_dim();
    let mut out = g.clone();
    for (row, yrow) in out.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
        let dot: f32 = row.iter().zip(yrow).map(|(a, b)| a * b).sum();
        for (gv, yv) in row.iter_mut().zip(yrow) {
            *gv = yv * (*gv - dot);
        }
    }
    out
}

pub(crate) fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> (Tensor, Vec<f32>, Vec<f32>) {
    let d = x.last_dim();
    let rows = x.numel() / d;
    let mut out = x.clone();
    let mut xhat = vec![0.0f32; x.numel()];
    let mut rstd = vec![0.0f32; rows];
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for (j, v) in row.iter_mut().enumerate() {
            let h = (*v - mean) * rs;
            xhat[r * d + j] = h;
            *v = h * gamma.data()[j] + beta.data()[j];
        }
    }
    (out, xhat, rstd)
}

pub(crate) fn layer_norm_backward(g: &Tensor, gamma: &Tensor, xhat: &[f32], rstd: &[f32]) -> (Tensor, Tensor, Tensor) {
    let d = g.last_dim();
    let mut dx = g.clone();
    let mut dgamma = vec![0.0f32; d];
    let mut dbeta = vec![0.0f32; d];
    for (r, row) in dx.data_mut().chunks_mut(d).enumerate() {
        let h = &xhat[r * d..(r + 1) * d];
        let mut sum_dh = 0.0f32;
        let mut sum_dh_h = 0.0f32;
        for j in 0..d {
            dgamma[j] += row[j] * h[j];
            dbeta[j] += row[j];
            let dh = row[j] * gamma.data()[j];
            sum_dh += dh;
            sum_dh_h += dh * h[j];
        }
        let n = d as f32;
        for j in 0..d {
            let dh = row[j] * gamma.data()[j];
            row[j] = rstd[r] / n * (n * dh - sum_dh - h[j] * sum_dh_h);
        }
    }
    (dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta))
}

/// Returns (mean loss, softmax probabilities, number of counted rows).
pub(crate) fn cross_entropy(logits: &[f32], targets: &[usize], v: usize) -> (f32, Vec<f32>, usize) {
    let mut probs = logits.to_vec();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (row, &t) in probs.chunks_mut(v).zip(targets) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let shifted_t = (t != IGNORE_INDEX).then(|| row[t] - max);
        let mut sum = 0.0f32;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        if let Some(s) = shifted_t {
            total += (sum.ln() - s) as f64;
            count += 1;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    let loss = if count > 0 { (total / count as f64) as f32 } else { 0.0 };
    (loss, probs, count)
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = end - start;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * shape[axis] * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(out_shape, data).expect("slice shape")
}

pub(crate) fn unslice(g: &Tensor, full: &[usize], axis: usize, start: usize) -> Tensor {
    let mut out = Tensor::zeros(full);
    let outer: usize = full[..axis].iter().product();
    let inner: usize = full[axis + 1..].iter().product();
    let len = g.shape()[axis];
    for o in 0..outer {
        let dst = o * full[axis] * inner + start * inner;
        let src = o * len * inner;
        out.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    out
}
