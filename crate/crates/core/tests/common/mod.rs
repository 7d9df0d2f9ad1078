#![allow(dead_code)]

use amaq::cli::RunConfig;

/// A three-layer MLP on char_lm, small enough for thousands of steps on one core.
pub const TINY: &str = r#"{
  "model": {"arch": "mlp", "d_model": 8, "n_layers": 3, "n_heads": 1, "vocab_size": 32,
            "max_seq_len": 8, "split": [1, 2], "tuning": {"kind": "full"}, "ff_mult": 2},
  "task": {"name": "char_lm", "train_size": 64, "eval_size": 8, "seq_len": 8},
  "optim": {"model_lr": 0.003, "bits_lr": 0.01, "steps": 50, "batch_size": 4, "seed": 0},
  "quant": {"mode": "none"}
}"#;

pub const AMAQ: &str =
    r#"{"mode":"amaq","b_min":1,"b_max":16,"b_init":8,"target":4,"alpha":1.0,"beta":0.02,"clip":"mean_gate"}"#;

pub fn config(base: &str, overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_json(base, &o).unwrap()
}

/// `TINY` with a replacement quant section.
pub fn tiny_with_quant(quant: &str, overrides: &[&str]) -> RunConfig {
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["quant"] = serde_json::from_str(quant).unwrap();
    config(&v.to_string(), overrides)
}

pub const AMAQ4_PRESET: &str = include_str!("../../configs/amaq4.json");

/// Shrinks a preset to a 16-wide transformer over 16-token windows.
pub const SMALL: &[&str] = &[
    "model.d_model=16",
    "model.n_heads=2",
    "model.max_seq_len=16",
    "task.seq_len=16",
    "eval_every=0",
];

/// The amaq4 preset at small size, plus extra overrides.
pub fn small(extra: &[&str]) -> RunConfig {
    let all: Vec<&str> = SMALL.iter().chain(extra).copied().collect();
    config(AMAQ4_PRESET, &all)
}

/// Per-site mean-bit series of a run.
pub fn site_series(metrics: &[amaq::harness::RunMetrics]) -> Vec<(String, Vec<f64>)> {
    let names: Vec<String> = metrics[0].sites.iter().map(|s| s.site.clone()).collect();
    names
        .into_iter()
        .map(|n| {
            let v = metrics.iter().map(|m| m.site(&n).unwrap().mean_bits).collect();
            (n, v)
        })
        .collect()
}
