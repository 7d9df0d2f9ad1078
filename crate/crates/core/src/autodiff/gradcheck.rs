//! Central finite-difference checks of tape gradients.
//!
//! The output of the checked graph is reduced to a scalar with a fixed
//! random projection `r`, so that `f(x) = sum(r * out(x))`. The analytic
//! gradient comes from seeding backward with `r`; the numeric one only uses
//! forward evaluations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all inputs.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// Builds a graph from leaves holding `inputs` and returns its output.
pub type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval(inputs: &[Tensor], build: &Builder, proj: Option<&Tensor>) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let value = tape.value(out).clone();
    let f = match proj {
        Some(r) => value
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum(),
        None => 0.0,
    };
    Ok((f, value))
}

/// Compares backward against central differences with step `eps`.
pub fn check(name: &str, inputs: &[Tensor], build: &Builder, eps: f32, tol: f64, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, out) = eval(inputs, build, None)?;
    let proj = Tensor::new(
        out.shape().to_vec(),
        (0..out.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars)?;
    let mut store = ParamStore::new();
    let grads = tape.backward_seeded(&[(root, proj.clone())], &mut store)?;

    let mut diff_sq = 0.0f64;
    let mut a_sq = 0.0f64;
    let mut n_sq = 0.0f64;
    let mut max_abs = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let (fp, _) = eval(&plus, build, Some(&proj))?;
            let (fm, _) = eval(&minus, build, Some(&proj))?;
            let numeric = (fp - fm) / (2.0 * eps as f64);
            let a = analytic.data()[i] as f64;
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
    }
    let denom = a_sq.sqrt().max(n_sq.sqrt()).max(1e-12);
    let rel_err = diff_sq.sqrt() / denom;
    Ok(CheckReport {
        name: name.to_string(),
        rel_err,
        max_abs_err: max_abs,
        passed: rel_err < tol,
    })
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], scale: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}
