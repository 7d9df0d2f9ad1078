//! Operator commands behind the `amaq` binary.
//!
//! Exit codes: 0 success, 1 failed check, 2 config error, 3 protocol or
//! I/O error, 4 numerical abort.

pub mod config;

pub use config::{apply_override, NetRole, NetworkConfig, RunConfig};

use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::random_tensor;
use crate::error::{Error, Result};
use crate::harness::oracles::run_oracle_suite;
use crate::harness::{apply_sync, export, train_local_until, EvalReport, ExportFormat, MetricsSink, ServerEndpoint};
use crate::nets::{save_checkpoint, Checkpoint};
use crate::quant::{fake_quant, Granularity, QuantAxis, QuantPacket, UnitLayout};
use crate::wire::{
    pack, pack_raw, predicted_size, predicted_size_raw, run_client_with, run_server_with, unpack, PackedMeta, Role,
};

#[derive(Parser, Debug)]
#[command(
    name = "amaq",
    version,
    about = "Mixed-bit activation quantization for split training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces optim.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sets a config leaf, e.g. `--override quant.beta=0.03`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train all three stages in this process.
    Train(RunArgs),
    /// Host the middle stage and wait for one client.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        listen: Option<String>,
    },
    /// Run the client stages against a server.
    Connect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        connect: Option<String>,
    },
    /// Predicted vs measured packed sizes and pack/unpack throughput.
    BenchPack {
        /// Tensor shape, channels last, e.g. `16,8`.
        #[arg(long, default_value = "16,8", value_delimiter = ',')]
        shape: Vec<usize>,
        /// Bit-widths to measure.
        #[arg(long, default_value = "1,2,3,4,8,16", value_delimiter = ',')]
        bits: Vec<f64>,
        /// `tensor`, `channel`, `token` or `group:N`.
        #[arg(long, default_value = "channel")]
        granularity: String,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Runs the gradient oracle suite over every custom op.
    GradCheck {
        /// Takes the seed from this config when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Writes `export.<format>` for a run directory, sorted by (step, site).
    Export {
        /// Run directory holding metrics.csv or metrics.jsonl.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
    },
}

/// Loads the config with flag overrides applied.
pub fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("optim.seed={seed}"));
    }
    if let Some(out) = &args.out {
        overrides.push(format!("out={}", serde_json::to_string(&out.display().to_string())?));
    }
    RunConfig::load(&args.config, &overrides)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.digest()[..12]))
}

fn write_eval(dir: &Path, evals: &[(usize, EvalReport)]) -> Result<()> {
    let rows: Vec<serde_json::Value> = evals
        .iter()
        .map(|(step, r)| serde_json::json!({"step": step, "ppl": r.ppl, "exact_match": r.exact_match, "accuracy": r.accuracy, "loss": r.loss}))
        .collect();
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

static STOP: AtomicBool = AtomicBool::new(false);

type Live = Arc<Mutex<Option<TcpStream>>>;

/// Installs a Ctrl-C handler. Local training finishes its current step; a
/// live socket is shut down so the session checkpoints and exits; with
/// neither (a server still waiting for its client) the process exits.
fn install_signal_handler(live: Option<Live>) {
    let res = ctrlc::set_handler(move || {
        STOP.store(true, Ordering::SeqCst);
        let Some(live) = &live else { return };
        match live
            .lock()
            .ok()
            .and_then(|g| g.as_ref().and_then(|s| s.try_clone().ok()))
        {
            Some(s) => {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
            None => std::process::exit(130),
        }
    });
    if let Err(e) = res {
        log::debug!("signal handler not installed: {e}");
    }
}

pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg);
    install_signal_handler(None);
    let sink = MetricsSink::create(&dir, &cfg.digest())?;
    let run = train_local_until(&cfg, Some(&sink), Some(&STOP))?;
    sink.finish()?;
    let ck = Checkpoint::from_stores(
        &cfg.digest(),
        &[
            &run.client.front.params,
            &run.server.middle.params,
            &run.client.back.params,
        ],
    )?;
    save_checkpoint(&dir.join("model.ckpt"), &ck)?;
    write_eval(&dir, &run.evals)?;
    let last = run.metrics.last();
    let ev = run.final_eval();
    println!(
        "steps {}  loss {:.4}  mean_bits {:.3}  eval ppl {:.4}  exact {:.3}  -> {}",
        run.metrics.len(),
        last.map_or(f64::NAN, |m| m.task_loss),
        last.map_or(f64::NAN, |m| m.mean_bits()),
        ev.ppl,
        ev.exact_match,
        dir.display()
    );
    Ok(())
}

fn address(flag: &Option<String>, cfg: &Option<String>, what: &str) -> Result<String> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| Error::Config(format!("no {what} address: pass --{what} or set network.{what}")))
}

pub fn cmd_serve(args: &RunArgs, listen: &Option<String>) -> Result<()> {
    let cfg = load_config(args)?;
    let addr = address(listen, &cfg.network.listen, "listen")?;
    let dir = out_dir(&cfg);
    let live: Live = Arc::new(Mutex::new(None));
    install_signal_handler(Some(live.clone()));
    let listener = TcpListener::bind(&addr)?;
    log::info!("listening on {}", listener.local_addr()?);
    let server = run_server_with(&listener, &cfg, Some(&dir), &|s| {
        *live.lock().expect("socket slot") = s.try_clone().ok();
    })?;
    let ck = Checkpoint::from_stores(&cfg.digest(), &[&server.middle.params])?;
    std::fs::create_dir_all(&dir)?;
    save_checkpoint(&dir.join("server.ckpt"), &ck)?;
    println!("session complete -> {}", dir.display());
    Ok(())
}

pub fn cmd_connect(args: &RunArgs, connect: &Option<String>) -> Result<()> {
    let cfg = load_config(args)?;
    let addr = address(connect, &cfg.network.connect, "connect")?;
    let dir = out_dir(&cfg);
    let live: Live = Arc::new(Mutex::new(None));
    install_signal_handler(Some(live.clone()));
    let sink = MetricsSink::create(&dir, &cfg.digest())?;
    let session = run_client_with(addr.as_str(), &cfg, Some(&sink), Some(&dir), &|s| {
        *live.lock().expect("socket slot") = s.try_clone().ok();
    })?;
    sink.finish()?;
    let mut middle = ServerEndpoint::new(&cfg)?.middle;
    apply_sync(&mut middle, &session.synced)?;
    let ck = Checkpoint::from_stores(
        &cfg.digest(),
        &[
            &session.client.front.params,
            &middle.params,
            &session.client.back.params,
        ],
    )?;
    save_checkpoint(&dir.join("model.ckpt"), &ck)?;
    write_eval(&dir, &session.evals)?;
    let ev = session.evals.last().expect("final evaluation").1;
    println!(
        "steps {}  eval ppl {:.4}  exact {:.3}  -> {}",
        session.metrics.len(),
        ev.ppl,
        ev.exact_match,
        dir.display()
    );
    Ok(())
}

pub fn parse_granularity(s: &str) -> Result<(Granularity, QuantAxis)> {
    match s {
        "tensor" => Ok((Granularity::Tensor, QuantAxis::Channel)),
        "channel" => Ok((Granularity::Channel, QuantAxis::Channel)),
        "token" => Ok((Granularity::Channel, QuantAxis::Token)),
        _ => s
            .strip_prefix("group:")
            .and_then(|g| g.parse().ok())
            .filter(|&g: &usize| g > 0)
            .map(|g| (Granularity::Group(g), QuantAxis::Channel))
            .ok_or_else(|| Error::Config(format!("unknown granularity {s:?}"))),
    }
}

/// One `bench-pack` measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub bits: f64,
    pub predicted: usize,
    pub measured: usize,
    pub raw_f32: usize,
    /// Throughput in MB/s of f32 input.
    pub pack_mbps: f64,
    pub unpack_mbps: f64,
}

pub fn bench_pack(shape: &[usize], bits: f64, layout: UnitLayout, iters: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(shape, 1.0, &mut rng);
    let fq = fake_quant(&x, &[bits], layout)?;
    let packet = QuantPacket::from_result(&fq);
    let meta = PackedMeta {
        tensor_id: 0,
        step: 0,
        role: Role::FwdAct,
    };
    let iters = iters.max(1);
    let t0 = Instant::now();
    let mut bytes = Vec::new();
    for _ in 0..iters {
        bytes = pack(&packet, meta)?;
    }
    let pack_s = t0.elapsed().as_secs_f64();
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(unpack(&bytes)?);
    }
    let unpack_s = t0.elapsed().as_secs_f64();
    let mb = (x.numel() * 4 * iters) as f64 / 1e6;
    Ok(BenchRow {
        bits,
        predicted: predicted_size(shape, &layout, &packet.wire_bits),
        measured: bytes.len(),
        raw_f32: pack_raw(
            &x,
            PackedMeta {
                role: Role::RawF32,
                ..meta
            },
        )?
        .len()
        .max(predicted_size_raw(shape)),
        pack_mbps: mb / pack_s.max(1e-12),
        unpack_mbps: mb / unpack_s.max(1e-12),
    })
}

pub fn cmd_bench_pack(shape: &[usize], bits: &[f64], granularity: &str, iters: usize, seed: u64) -> Result<()> {
    let (g, axis) = parse_granularity(granularity)?;
    let layout = UnitLayout::new(shape, g, axis).map_err(|e| Error::Config(e.to_string()))?;
    println!("shape {shape:?}  granularity {granularity}  iters {iters}");
    println!(
        "{:>5} {:>10} {:>10} {:>10} {:>12} {:>12}",
        "bits", "predicted", "measured", "raw_f32", "pack MB/s", "unpack MB/s"
    );
    for &b in bits {
        if !(1.0..=16.0).contains(&b) {
            return Err(Error::Config(format!("bits must be in [1, 16], got {b}")));
        }
        let r = bench_pack(shape, b, layout, iters, seed)?;
        println!(
            "{:>5} {:>10} {:>10} {:>10} {:>12.1} {:>12.1}",
            r.bits, r.predicted, r.measured, r.raw_f32, r.pack_mbps, r.unpack_mbps
        );
    }
    Ok(())
}

/// Prints the oracle table; returns whether every check passed.
pub fn cmd_grad_check(config: &Option<PathBuf>, seed: Option<u64>) -> Result<bool> {
    let seed = match (seed, config) {
        (Some(s), _) => s,
        (None, Some(p)) => RunConfig::load(p, &[])?.optim.seed,
        (None, None) => 0,
    };
    let checks = run_oracle_suite(seed)?;
    println!("{:<14} {:<32} {:>12} {:>10}  result", "suite", "check", "error", "tol");
    for c in &checks {
        println!(
            "{:<14} {:<32} {:>12.3e} {:>10.0e}  {}",
            c.suite,
            c.name,
            c.error,
            c.tolerance,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(failed == 0)
}

pub fn cmd_export(run: &Path, format: FormatArg) -> Result<()> {
    let fmt = match format {
        FormatArg::Csv => ExportFormat::Csv,
        FormatArg::Jsonl => ExportFormat::Jsonl,
    };
    println!("{}", export(run, fmt)?.display());
    Ok(())
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Serve { run, listen } => cmd_serve(run, listen).map(|_| true),
        Command::Connect { run, connect } => cmd_connect(run, connect).map(|_| true),
        Command::BenchPack {
            shape,
            bits,
            granularity,
            iters,
            seed,
        } => cmd_bench_pack(shape, bits, granularity, *iters, *seed).map(|_| true),
        Command::GradCheck { config, seed } => cmd_grad_check(config, *seed),
        Command::Export { run, format } => cmd_export(run, *format).map(|_| true),
    };
    match res {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Logging filter from `AMAQ_LOG` (default `info`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("AMAQ_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}
