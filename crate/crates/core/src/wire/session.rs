//! Lockstep training session over TCP.
//!
//! ```text
//! client                          server
//! HELLO {version, digest, ..} ->
//!                              <- HELLO_ACK | ERROR
//! per step:
//! FWD_ACT (front output)      ->
//!                              <- FWD_ACT (middle output)
//! BWD_GRAD (back input grad)  ->
//!                              <- BWD_GRAD (middle input grad)
//!                              <- METRICS (server sites)
//! METRICS (step record)       ->
//! evaluation: FWD_ACT with the eval flag, answered by FWD_ACT
//! BYE                         ->
//!                              <- LORA_SYNC per trainable tensor, then BYE
//! ```
//!
//! Control bodies (HELLO, HELLO_ACK, METRICS, ERROR) are JSON. If either
//! side fails mid-session it writes a checkpoint of its last completed step.

use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cli::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{ClientEndpoint, EvalAccum, EvalReport, MetricsSink, RunMetrics, ServerEndpoint, ServerReport};
use crate::nets::{save_checkpoint, Checkpoint};

use super::frame::{read_frame, write_frame, Frame, Tag};
use super::packed::{pack_raw, unpack, PackedMeta, Role, Unpacked};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub version: u32,
    pub config_digest: String,
    pub quant_mode: String,
    pub seed: u64,
    pub train_size: usize,
    pub batch_size: usize,
    pub steps: usize,
}

impl Hello {
    pub fn for_config(cfg: &RunConfig) -> Self {
        Hello {
            version: PROTOCOL_VERSION,
            config_digest: cfg.digest(),
            quant_mode: cfg.quant.name().to_string(),
            seed: cfg.optim.seed,
            train_size: cfg.task.train_size,
            batch_size: cfg.optim.batch_size,
            steps: cfg.optim.steps,
        }
    }

    /// Describes the first disagreement with `ours`.
    fn mismatch(&self, ours: &Hello) -> Option<String> {
        if self.version != ours.version {
            return Some(format!("protocol version {} != {}", self.version, ours.version));
        }
        if self.config_digest != ours.config_digest {
            return Some(format!(
                "config digest {} != {}",
                self.config_digest, ours.config_digest
            ));
        }
        if self != ours {
            return Some(format!("session parameters differ: {self:?} vs {ours:?}"));
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub message: String,
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("control message serializes")
}

fn parse<'a, T: Deserialize<'a>>(body: &'a [u8], what: &str) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| Error::Protocol(format!("bad {what} body: {e}")))
}

struct Conn {
    r: BufReader<TcpStream>,
    w: BufWriter<TcpStream>,
}

impl Conn {
    fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Conn {
            r: BufReader::new(stream.try_clone()?),
            w: BufWriter::new(stream),
        })
    }

    fn send(&mut self, tag: Tag, body: Vec<u8>) -> Result<()> {
        write_frame(&mut self.w, &Frame::new(tag, body)).map(|_| ())
    }

    fn recv(&mut self) -> Result<Frame> {
        read_frame(&mut self.r)
    }

    /// Receives a frame of the given tag; an ERROR frame becomes an error.
    fn expect(&mut self, tag: Tag) -> Result<Vec<u8>> {
        let f = self.recv()?;
        match f.tag {
            t if t == tag => Ok(f.body),
            Tag::Error => Err(Error::Protocol(format!(
                "peer error: {}",
                parse::<ErrorBody>(&f.body, "ERROR")?.message
            ))),
            t => Err(Error::Protocol(format!("expected {tag:?}, got {t:?}"))),
        }
    }

    fn refuse(&mut self, message: &str) {
        let _ = self.send(
            Tag::Error,
            json(&ErrorBody {
                message: message.to_string(),
            }),
        );
    }
}

/// Serves one client session on an already bound listener.
pub fn run_server(listener: &TcpListener, cfg: &RunConfig, out: Option<&Path>) -> Result<ServerEndpoint> {
    run_server_with(listener, cfg, out, &|_| {})
}

/// As [`run_server`]; `on_connect` sees the accepted socket, e.g. to shut it
/// down from a signal handler.
pub fn run_server_with(
    listener: &TcpListener,
    cfg: &RunConfig,
    out: Option<&Path>,
    on_connect: &dyn Fn(&TcpStream),
) -> Result<ServerEndpoint> {
    let mut server = ServerEndpoint::new(cfg)?;
    let (stream, peer) = listener.accept()?;
    log::info!("client connected from {peer}");
    on_connect(&stream);
    let mut conn = Conn::new(stream)?;
    match serve(&mut conn, &mut server, cfg) {
        Ok(()) => Ok(server),
        Err(e) => {
            if let Error::Protocol(_) | Error::Integrity(_) | Error::Framing(_) | Error::Numerical(_) = e {
                conn.refuse(&e.to_string());
            }
            if let Some(dir) = out {
                let ck = Checkpoint::from_stores(&cfg.digest(), &[&server.middle.params])?;
                std::fs::create_dir_all(dir)?;
                save_checkpoint(&dir.join("server.ckpt"), &ck)?;
                log::warn!("session aborted; checkpoint written to {}", dir.display());
            }
            Err(e)
        }
    }
}

fn serve(conn: &mut Conn, server: &mut ServerEndpoint, cfg: &RunConfig) -> Result<()> {
    let hello: Hello = parse(&conn.expect(Tag::Hello)?, "HELLO")?;
    let ours = Hello::for_config(cfg);
    if let Some(why) = hello.mismatch(&ours) {
        return Err(Error::Protocol(format!("refused client: {why}")));
    }
    conn.send(Tag::HelloAck, json(&ours))?;
    loop {
        let f = conn.recv()?;
        match f.tag {
            Tag::FwdAct => {
                let reply = server.on_forward(&f.body)?;
                conn.send(Tag::FwdAct, reply)?;
            }
            Tag::BwdGrad => {
                let (reply, report) = server.on_backward(&f.body)?;
                conn.send(Tag::BwdGrad, reply)?;
                conn.send(Tag::Metrics, json(&report))?;
            }
            Tag::Metrics => {
                let m: RunMetrics = parse(&f.body, "METRICS")?;
                log::debug!("client step {} loss {:.4}", m.step, m.task_loss);
            }
            Tag::Bye => {
                for (id, t) in server.trainable() {
                    let meta = PackedMeta {
                        tensor_id: id,
                        step: cfg.optim.steps as u32,
                        role: Role::LoraWeights,
                    };
                    conn.send(Tag::LoraSync, pack_raw(&t, meta)?)?;
                }
                conn.send(Tag::Bye, Vec::new())?;
                return Ok(());
            }
            Tag::Error => {
                return Err(Error::Protocol(format!(
                    "peer error: {}",
                    parse::<ErrorBody>(&f.body, "ERROR")?.message
                )))
            }
            t => return Err(Error::Protocol(format!("unexpected {t:?} frame"))),
        }
    }
}

/// What a client session leaves behind.
pub struct ClientSession {
    pub metrics: Vec<RunMetrics>,
    pub evals: Vec<(usize, EvalReport)>,
    pub client: ClientEndpoint,
    /// Trainable middle weights synced at the end, by parameter index.
    pub synced: Vec<(u32, Tensor)>,
}

/// Connects to a server and trains for `cfg.optim.steps` steps.
pub fn run_client(
    addr: impl ToSocketAddrs,
    cfg: &RunConfig,
    sink: Option<&MetricsSink>,
    out: Option<&Path>,
) -> Result<ClientSession> {
    run_client_with(addr, cfg, sink, out, &|_| {})
}

/// As [`run_client`], with a hook on the connected socket.
pub fn run_client_with(
    addr: impl ToSocketAddrs,
    cfg: &RunConfig,
    sink: Option<&MetricsSink>,
    out: Option<&Path>,
    on_connect: &dyn Fn(&TcpStream),
) -> Result<ClientSession> {
    let mut client = ClientEndpoint::new(cfg)?;
    let stream = TcpStream::connect(addr)?;
    on_connect(&stream);
    let mut conn = Conn::new(stream)?;
    let mut metrics = Vec::with_capacity(cfg.optim.steps);
    let mut evals = Vec::new();
    match drive(&mut conn, &mut client, cfg, sink, &mut metrics, &mut evals) {
        Ok(synced) => Ok(ClientSession {
            metrics,
            evals,
            client,
            synced,
        }),
        Err(e) => {
            if let Error::Integrity(_) | Error::Framing(_) | Error::Numerical(_) = e {
                conn.refuse(&e.to_string());
            }
            if let Some(dir) = out {
                let ck = Checkpoint::from_stores(&cfg.digest(), &[&client.front.params, &client.back.params])?;
                std::fs::create_dir_all(dir)?;
                save_checkpoint(&dir.join("client.ckpt"), &ck)?;
                log::warn!("session aborted after {} steps; checkpoint written", metrics.len());
            }
            Err(e)
        }
    }
}

fn eval_remote(conn: &mut Conn, client: &mut ClientEndpoint) -> Result<EvalReport> {
    let mut acc = EvalAccum::default();
    for k in 0..client.eval_batches() {
        conn.send(Tag::FwdAct, client.eval_begin(k)?)?;
        let reply = conn.expect(Tag::FwdAct)?;
        client.eval_finish(&reply, &mut acc)?;
    }
    acc.report()
}

fn drive(
    conn: &mut Conn,
    client: &mut ClientEndpoint,
    cfg: &RunConfig,
    sink: Option<&MetricsSink>,
    metrics: &mut Vec<RunMetrics>,
    evals: &mut Vec<(usize, EvalReport)>,
) -> Result<Vec<(u32, Tensor)>> {
    conn.send(Tag::Hello, json(&Hello::for_config(cfg)))?;
    let ack: Hello = parse(&conn.expect(Tag::HelloAck)?, "HELLO_ACK")?;
    if let Some(why) = ack.mismatch(&Hello::for_config(cfg)) {
        return Err(Error::Protocol(format!("server disagrees: {why}")));
    }
    for step in 0..cfg.optim.steps {
        conn.send(Tag::FwdAct, client.begin_step(step)?)?;
        let act = conn.expect(Tag::FwdAct)?;
        conn.send(Tag::BwdGrad, client.on_forward(&act)?)?;
        let grad = conn.expect(Tag::BwdGrad)?;
        let report: ServerReport = parse(&conn.expect(Tag::Metrics)?, "METRICS")?;
        let m = client.finish_step(&grad, &report)?;
        conn.send(Tag::Metrics, json(&m))?;
        if let Some(s) = sink {
            s.push(&m)?;
        }
        metrics.push(m);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.optim.steps {
            evals.push((step + 1, eval_remote(conn, client)?));
        }
    }
    evals.push((cfg.optim.steps, eval_remote(conn, client)?));
    conn.send(Tag::Bye, Vec::new())?;
    let mut synced = Vec::new();
    loop {
        let f = conn.recv()?;
        match f.tag {
            Tag::LoraSync => match unpack(&f.body)? {
                (Unpacked::Raw(t), meta) if meta.role == Role::LoraWeights => synced.push((meta.tensor_id, t)),
                _ => return Err(Error::Protocol("LORA_SYNC must carry raw weights".into())),
            },
            Tag::Bye => return Ok(synced),
            t => return Err(Error::Protocol(format!("unexpected {t:?} frame after BYE"))),
        }
    }
}
