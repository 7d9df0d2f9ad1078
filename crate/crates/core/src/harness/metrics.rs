//! Per-step metrics, CSV/JSONL writers and readers.
//!
//! Files start with the run's config digest (`# config_digest=...` in CSV,
//! a `{"config_digest": ...}` object in JSONL) followed by one row per
//! `(step, site)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,task_loss,bits_loss,site,mean_bits,bytes_tx,bytes_rx,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteMetric {
    pub site: String,
    pub mean_bits: f64,
    pub bits_loss: f64,
}

/// One training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub step: usize,
    pub task_loss: f64,
    /// Mean of the per-site regularizers.
    pub bits_loss: f64,
    pub sites: Vec<SiteMetric>,
    /// Packed tensor bytes sent by the client this step.
    pub bytes_tx: usize,
    /// Packed tensor bytes received by the client this step.
    pub bytes_rx: usize,
    pub wall_ms: f64,
}

impl RunMetrics {
    pub fn site(&self, name: &str) -> Option<&SiteMetric> {
        self.sites.iter().find(|s| s.site == name)
    }

    /// Mean bit-width over all sites.
    pub fn mean_bits(&self) -> f64 {
        self.sites.iter().map(|s| s.mean_bits).sum::<f64>() / self.sites.len().max(1) as f64
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        self.sites
            .iter()
            .map(|s| MetricRow {
                step: self.step,
                task_loss: self.task_loss,
                bits_loss: s.bits_loss,
                site: s.site.clone(),
                mean_bits: s.mean_bits,
                bytes_tx: self.bytes_tx,
                bytes_rx: self.bytes_rx,
                wall_ms: self.wall_ms,
            })
            .collect()
    }
}

/// One CSV line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub task_loss: f64,
    pub bits_loss: f64,
    pub site: String,
    pub mean_bits: f64,
    pub bytes_tx: usize,
    pub bytes_rx: usize,
    pub wall_ms: f64,
}

impl MetricRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.task_loss,
            self.bits_loss,
            self.site,
            self.mean_bits,
            self.bytes_tx,
            self.bytes_rx,
            self.wall_ms
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Invalid(format!("metrics row needs 8 fields: {line}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Invalid(format!("bad number {s:?} in {line}")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad integer {s:?} in {line}")))
        };
        Ok(MetricRow {
            step: int(f[0])?,
            task_loss: num(f[1])?,
            bits_loss: num(f[2])?,
            site: f[3].to_string(),
            mean_bits: num(f[4])?,
            bytes_tx: int(f[5])?,
            bytes_rx: int(f[6])?,
            wall_ms: num(f[7])?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DigestLine {
    config_digest: String,
}

pub fn write_csv(path: &Path, digest: &str, rows: &[MetricRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# config_digest={digest}")?;
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(path: &Path, digest: &str, rows: &[MetricRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "{}",
        serde_json::to_string(&DigestLine {
            config_digest: digest.into()
        })?
    )?;
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Returns `(config_digest, rows)`.
pub fn read_csv(path: &Path) -> Result<(String, Vec<MetricRow>)> {
    let mut digest = String::new();
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if let Some(d) = line.strip_prefix("# config_digest=") {
            digest = d.to_string();
        } else if line == CSV_HEADER || line.is_empty() {
            continue;
        } else {
            rows.push(MetricRow::from_csv(&line)?);
        }
    }
    Ok((digest, rows))
}

pub fn read_jsonl(path: &Path) -> Result<(String, Vec<MetricRow>)> {
    let mut digest = String::new();
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if line.contains("\"config_digest\"") {
            digest = serde_json::from_str::<DigestLine>(&line)?.config_digest;
        } else {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok((digest, rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

/// Reads the run's metrics (CSV preferred) and writes `export.<format>`
/// sorted by `(step, site)`.
pub fn export(run_dir: &Path, format: ExportFormat) -> Result<PathBuf> {
    if !run_dir.is_dir() {
        return Err(Error::Invalid(format!(
            "run directory {} does not exist",
            run_dir.display()
        )));
    }
    let csv = run_dir.join("metrics.csv");
    let jsonl = run_dir.join("metrics.jsonl");
    let (digest, mut rows) = if csv.exists() {
        read_csv(&csv)?
    } else if jsonl.exists() {
        read_jsonl(&jsonl)?
    } else {
        return Err(Error::Invalid(format!("no metrics found in {}", run_dir.display())));
    };
    rows.sort_by(|a, b| (a.step, &a.site).cmp(&(b.step, &b.site)));
    let out = match format {
        ExportFormat::Csv => {
            let p = run_dir.join("export.csv");
            write_csv(&p, &digest, &rows)?;
            p
        }
        ExportFormat::Jsonl => {
            let p = run_dir.join("export.jsonl");
            write_jsonl(&p, &digest, &rows)?;
            p
        }
    };
    Ok(out)
}

enum Msg {
    Row(Box<RunMetrics>),
    Done,
}

/// Appends metrics to `metrics.csv` and `metrics.jsonl` from a background
/// thread fed by a bounded queue.
pub struct MetricsSink {
    tx: SyncSender<Msg>,
    handle: Option<JoinHandle<Result<()>>>,
}

impl MetricsSink {
    pub fn create(dir: &Path, digest: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut csv = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        let mut jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        writeln!(csv, "# config_digest={digest}")?;
        writeln!(csv, "{CSV_HEADER}")?;
        writeln!(
            jsonl,
            "{}",
            serde_json::to_string(&DigestLine {
                config_digest: digest.into()
            })?
        )?;
        let (tx, rx) = sync_channel::<Msg>(256);
        let handle = std::thread::spawn(move || -> Result<()> {
            while let Ok(Msg::Row(m)) = rx.recv() {
                for r in m.rows() {
                    writeln!(csv, "{}", r.to_csv())?;
                    writeln!(jsonl, "{}", serde_json::to_string(&r)?)?;
                }
            }
            csv.flush()?;
            jsonl.flush()?;
            Ok(())
        });
        Ok(MetricsSink {
            tx,
            handle: Some(handle),
        })
    }

    pub fn push(&self, m: &RunMetrics) -> Result<()> {
        self.tx
            .send(Msg::Row(Box::new(m.clone())))
            .map_err(|_| Error::Invalid("metrics writer stopped".into()))
    }

    /// Flushes and joins the writer.
    pub fn finish(mut self) -> Result<()> {
        self.close()
    }

    fn close(&mut self) -> Result<()> {
        let _ = self.tx.send(Msg::Done);
        match self.handle.take() {
            Some(h) => h.join().map_err(|_| Error::Invalid("metrics writer panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for MetricsSink {
    fn drop(&mut self) {
        let _ = self.close();
    }
}
