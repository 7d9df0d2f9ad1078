//! Compares unquantized, fixed 4-bit and AMAQ training of a tiny MLP on the
//! character language model, both endpoints in one process.

use amaq::cli::RunConfig;
use amaq::harness::train_local;

const BASE: &str = r#"{
  "model": {"arch": "mlp", "d_model": 16, "n_layers": 3, "n_heads": 1, "vocab_size": 32,
            "max_seq_len": 16, "split": [1, 2], "tuning": {"kind": "full"}, "ff_mult": 2},
  "task": {"name": "char_lm", "train_size": 256, "eval_size": 32, "seq_len": 16},
  "optim": {"model_lr": 0.003, "bits_lr": 0.01, "steps": 400, "batch_size": 8, "seed": 0},
  "quant": {"mode": "none"}
}"#;

fn main() -> amaq::Result<()> {
    let quants = [
        ("none", r#"{"mode":"none"}"#),
        ("fixed4", r#"{"mode":"fixed","bits":4,"granularity":"channel"}"#),
        (
            "amaq",
            r#"{"mode":"amaq","b_min":1,"b_max":16,"b_init":8,"target":4,"alpha":1.0,"beta":0.02,"clip":"mean_gate"}"#,
        ),
    ];
    for (name, q) in quants {
        let cfg = RunConfig::from_json(BASE, &[format!("quant={q}")])?;
        let run = train_local(&cfg, None)?;
        let tail = &run.metrics[run.metrics.len() - 50..];
        let bytes = tail.iter().map(|m| m.bytes_tx + m.bytes_rx).sum::<usize>() / tail.len();
        println!("{name:>7}: eval ppl {:.3}, {bytes} bytes/step", run.final_eval().ppl);
    }
    Ok(())
}
