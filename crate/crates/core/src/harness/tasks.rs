//! Small synthetic tasks with deterministic generators.
//!
//! Every example is a token sequence `input` with a same-length `target`
//! sequence; positions that are not scored hold [`IGNORE_INDEX`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::IGNORE_INDEX;
use crate::error::{Error, Result};

const CORPUS: &str = include_str!("corpus.txt");
const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz .,;'\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    /// Next-character prediction over an embedded English corpus.
    CharLm,
    /// `a + b = c (mod p)`; only `c` is scored.
    ModularAdd,
    /// `x_1 .. x_m SEP x_1 .. x_m`; only the copy is scored.
    CopySeq,
    /// Bag-of-tokens linear classifier; the label is scored at the last position.
    SynthClassify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ppl,
    ExactMatch,
    Accuracy,
}

fn d_train() -> usize {
    512
}
fn d_eval() -> usize {
    64
}
fn d_seq() -> usize {
    32
}
fn d_modulus() -> usize {
    29
}
fn d_copy_len() -> usize {
    6
}
fn d_symbols() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: TaskName,
    /// Generator seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_train")]
    pub train_size: usize,
    #[serde(default = "d_eval")]
    pub eval_size: usize,
    /// Window length for `char_lm` and sequence length for `synth_classify`.
    #[serde(default = "d_seq")]
    pub seq_len: usize,
    #[serde(default = "d_modulus")]
    pub modulus: usize,
    #[serde(default = "d_copy_len")]
    pub copy_len: usize,
    /// Alphabet size for `copy_seq` and `synth_classify`.
    #[serde(default = "d_symbols")]
    pub symbols: usize,
    /// Headline metric; defaults by task.
    #[serde(default)]
    pub metric: Option<Metric>,
}

impl TaskSpec {
    pub fn new(name: TaskName) -> Self {
        TaskSpec {
            name,
            seed: 0,
            train_size: d_train(),
            eval_size: d_eval(),
            seq_len: d_seq(),
            modulus: d_modulus(),
            copy_len: d_copy_len(),
            symbols: d_symbols(),
            metric: None,
        }
    }

    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or(match self.name {
            TaskName::CharLm => Metric::Ppl,
            TaskName::ModularAdd | TaskName::CopySeq => Metric::ExactMatch,
            TaskName::SynthClassify => Metric::Accuracy,
        })
    }

    pub fn vocab_size(&self) -> usize {
        match self.name {
            TaskName::CharLm => CHARSET.len(),
            TaskName::ModularAdd => self.modulus + 2,
            TaskName::CopySeq => self.symbols + 1,
            TaskName::SynthClassify => self.symbols + 2,
        }
    }

    /// Model input length.
    pub fn input_len(&self) -> usize {
        match self.name {
            TaskName::CharLm | TaskName::SynthClassify => self.seq_len,
            TaskName::ModularAdd => 4,
            TaskName::CopySeq => 2 * self.copy_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_size == 0 || self.eval_size == 0 {
            return bad("task.train_size and task.eval_size must be >= 1".into());
        }
        match self.name {
            TaskName::CharLm => {
                let room = CORPUS.len() / 10;
                if self.seq_len == 0 || self.seq_len + 1 > room {
                    return bad(format!("task.seq_len must be in [1, {}]", room - 1));
                }
            }
            TaskName::ModularAdd => {
                if self.modulus < 2 || self.train_size + self.eval_size > self.modulus * self.modulus {
                    return bad(format!(
                        "task: modulus {} has only {} distinct pairs for {} train + {} eval",
                        self.modulus,
                        self.modulus * self.modulus,
                        self.train_size,
                        self.eval_size
                    ));
                }
            }
            TaskName::CopySeq => {
                if self.copy_len == 0 || self.symbols < 2 {
                    return bad("task: copy_seq needs copy_len >= 1 and symbols >= 2".into());
                }
            }
            TaskName::SynthClassify => {
                if self.seq_len == 0 || self.symbols < 2 {
                    return bad("task: synth_classify needs seq_len >= 1 and symbols >= 2".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// A row-major batch of equal-length examples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    /// Dataset index of each row.
    pub samples: Vec<u64>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn from_examples(examples: &[Example], indices: &[usize]) -> Self {
        let seq = examples[indices[0]].input.len();
        let mut ids = Vec::with_capacity(indices.len() * seq);
        let mut targets = Vec::with_capacity(indices.len() * seq);
        for &i in indices {
            ids.extend_from_slice(&examples[i].input);
            targets.extend_from_slice(&examples[i].target);
        }
        Batch {
            ids,
            targets,
            samples: indices.iter().map(|&i| i as u64).collect(),
            batch: indices.len(),
            seq,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

fn encode_char(c: char) -> usize {
    let c = c.to_ascii_lowercase();
    CHARSET.find(c).unwrap_or(26)
}

/// Builds the train and eval splits.
pub fn make_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (train, eval) = match spec.name {
        TaskName::CharLm => char_lm(spec, &mut rng),
        TaskName::ModularAdd => modular_add(spec, &mut rng),
        TaskName::CopySeq => copy_seq(spec, &mut rng),
        TaskName::SynthClassify => synth_classify(spec, &mut rng),
    };
    Ok(Task {
        spec: spec.clone(),
        train,
        eval,
    })
}

fn char_lm(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (Vec<Example>, Vec<Example>) {
    let text: Vec<usize> = CORPUS.chars().map(encode_char).collect();
    // the last tenth of the corpus is held out for evaluation
    let cut = text.len() - text.len() / 10;
    let w = spec.seq_len + 1;
    let window = |s: usize| Example {
        input: text[s..s + spec.seq_len].to_vec(),
        target: text[s + 1..s + w].to_vec(),
    };
    let train = (0..spec.train_size)
        .map(|_| window(rng.gen_range(0..=cut - w)))
        .collect();
    let eval = (0..spec.eval_size)
        .map(|_| window(rng.gen_range(cut..=text.len() - w)))
        .collect();
    (train, eval)
}

fn modular_add(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (Vec<Example>, Vec<Example>) {
    let p = spec.modulus;
    let mut pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (0..p).map(move |b| (a, b))).collect();
    pairs.shuffle(rng);
    let ex = |&(a, b): &(usize, usize)| Example {
        input: vec![a, p, b, p + 1],
        target: vec![IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX, (a + b) % p],
    };
    let train = pairs[..spec.train_size].iter().map(ex).collect();
    let eval = pairs[spec.train_size..spec.train_size + spec.eval_size]
        .iter()
        .map(ex)
        .collect();
    (train, eval)
}

fn copy_seq(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (Vec<Example>, Vec<Example>) {
    let m = spec.copy_len;
    let sep = spec.symbols;
    let mut seen = std::collections::HashSet::new();
    let mut gen = |n: usize, seen: &mut std::collections::HashSet<Vec<usize>>| {
        let mut out = Vec::with_capacity(n);
        let mut tries = 0;
        while out.len() < n {
            let xs: Vec<usize> = (0..m).map(|_| rng.gen_range(0..spec.symbols)).collect();
            tries += 1;
            // keep the splits disjoint while the alphabet allows it
            if !seen.insert(xs.clone()) && tries < 100 * n {
                continue;
            }
            let mut full = xs.clone();
            full.push(sep);
            full.extend_from_slice(&xs);
            let mut target = vec![IGNORE_INDEX; m];
            target.extend_from_slice(&full[m + 1..]);
            out.push(Example {
                input: full[..2 * m].to_vec(),
                target,
            });
        }
        out
    };
    let train = gen(spec.train_size, &mut seen);
    let eval = gen(spec.eval_size, &mut seen);
    (train, eval)
}

fn synth_classify(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (Vec<Example>, Vec<Example>) {
    let w: Vec<f64> = (0..spec.symbols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let margin = 0.5;
    let mut gen = |n: usize| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let xs: Vec<usize> = (0..spec.seq_len).map(|_| rng.gen_range(0..spec.symbols)).collect();
            let score: f64 = xs.iter().map(|&x| w[x]).sum();
            // a margin keeps the classes linearly separable with room to spare
            if score.abs() < margin {
                continue;
            }
            let label = spec.symbols + usize::from(score > 0.0);
            let mut target = vec![IGNORE_INDEX; spec.seq_len];
            target[spec.seq_len - 1] = label;
            out.push(Example { input: xs, target });
        }
        out
    };
    let train = gen(spec.train_size);
    let eval = gen(spec.eval_size);
    (train, eval)
}

/// Seeded per-epoch permutation of the training set, cut into batches.
/// Both endpoints derive it from the same three numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub seed: u64,
    pub train_size: usize,
    pub batch_size: usize,
}

impl Schedule {
    pub fn new(seed: u64, train_size: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > train_size {
            return Err(Error::Config(format!(
                "batch_size {batch_size} must be in [1, train_size = {train_size}]"
            )));
        }
        Ok(Schedule {
            seed,
            train_size,
            batch_size,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train_size / self.batch_size
    }

    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, k) = (step / per, step % per);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut perm: Vec<usize> = (0..self.train_size).collect();
        perm.shuffle(&mut rng);
        perm[k * self.batch_size..(k + 1) * self.batch_size].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modular_add_is_deterministic() {
        let mut s = TaskSpec::new(TaskName::ModularAdd);
        s.seed = 7;
        let a = make_task(&s).unwrap();
        let b = make_task(&s).unwrap();
        assert_eq!(a.train, b.train);
        let e = &a.train[0];
        assert_eq!(e.target[3], (e.input[0] + e.input[2]) % s.modulus);
    }

    #[test]
    fn char_lm_targets_are_shifted_inputs() {
        let mut s = TaskSpec::new(TaskName::CharLm);
        s.seq_len = 64;
        let t = make_task(&s).unwrap();
        for e in t.train.iter().take(5) {
            assert_eq!(&e.input[1..], &e.target[..63]);
        }
    }

    #[test]
    fn modular_add_splits_are_disjoint() {
        let t = make_task(&TaskSpec::new(TaskName::ModularAdd)).unwrap();
        for e in &t.eval {
            assert!(!t.train.contains(e));
        }
    }

    #[test]
    fn schedule_covers_each_epoch_once() {
        let s = Schedule::new(3, 10, 3).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|k| s.batch_indices(k)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_ne!(s.batch_indices(0), s.batch_indices(3));
    }
}
