//! Runs the server and client halves over a loopback TCP socket.

use std::net::TcpListener;
use std::thread;

use amaq::cli::RunConfig;
use amaq::wire::{run_client, run_server};

const CONFIG: &str = r#"{
  "model": {"arch": "transformer", "d_model": 16, "n_layers": 4, "n_heads": 2, "vocab_size": 32,
            "max_seq_len": 16, "split": [1, 3], "tuning": {"kind": "lora", "rank": 4, "lora_alpha": 8.0},
            "ff_mult": 2},
  "task": {"name": "copy_seq", "train_size": 256, "eval_size": 32, "seq_len": 16},
  "optim": {"model_lr": 0.003, "bits_lr": 0.01, "steps": 200, "batch_size": 8, "seed": 0},
  "quant": {"mode": "amaq", "b_min": 1, "b_max": 16, "b_init": 8, "target": 4, "alpha": 1.0,
            "beta": 0.02, "clip": "mean_gate"},
  "eval_every": 100
}"#;

fn main() -> amaq::Result<()> {
    let cfg = RunConfig::from_json(CONFIG, &[])?;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let server_cfg = cfg.clone();
    let server = thread::spawn(move || run_server(&listener, &server_cfg, None).map(|_| ()));
    let session = run_client(addr, &cfg, None, None)?;
    server.join().expect("server thread panicked")?;

    let tx: usize = session.metrics.iter().map(|m| m.bytes_tx).sum();
    let rx: usize = session.metrics.iter().map(|m| m.bytes_rx).sum();
    for (step, e) in &session.evals {
        println!("step {step:>4}: ppl {:.3}, exact match {:.3}", e.ppl, e.exact_match);
    }
    println!(
        "{tx} bytes sent, {rx} received, {} tensors synced",
        session.synced.len()
    );
    Ok(())
}
