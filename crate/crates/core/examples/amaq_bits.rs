//! Trains the small transformer preset with learnable bits on the synthetic
//! classifier and prints how each site's bit width moves toward the target.

use amaq::cli::RunConfig;
use amaq::harness::{bit_trajectory_guard, train_local};

const PRESET: &str = include_str!("../configs/amaq4.json");

fn main() -> amaq::Result<()> {
    let overrides: Vec<String> = [
        "model.d_model=16",
        "model.n_heads=2",
        "model.max_seq_len=16",
        "task.name=synth_classify",
        "task.seq_len=16",
        "optim.steps=800",
        "eval_every=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = RunConfig::from_json(PRESET, &overrides)?;
    let run = train_local(&cfg, None)?;
    for m in run.metrics.iter().step_by(100).chain(run.metrics.last()) {
        let bits: Vec<String> = m
            .sites
            .iter()
            .map(|s| format!("{}={:.2}", s.site, s.mean_bits))
            .collect();
        println!("step {:>4}  loss {:.4}  {}", m.step, m.task_loss, bits.join("  "));
    }
    match bit_trajectory_guard(&run.metrics[500..], 4.0, 0.1) {
        Ok(()) => println!("bits held within 4 +/- 0.1 after step 500"),
        Err(v) => println!("band left: {v:?}"),
    }
    println!("final accuracy {:.3}", run.final_eval().accuracy);
    Ok(())
}
