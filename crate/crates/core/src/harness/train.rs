//! Local training loop, evaluation and the bit-trajectory check.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::cli::RunConfig;
use crate::error::Result;

use super::metrics::{MetricsSink, RunMetrics};
use super::split::{ClientEndpoint, EvalAccum, EvalReport, ServerEndpoint, ServerReport};

/// Everything a finished run leaves behind.
pub struct RunResult {
    pub metrics: Vec<RunMetrics>,
    /// `(step, report)` for every evaluation, the final one last.
    pub evals: Vec<(usize, EvalReport)>,
    pub client: ClientEndpoint,
    pub server: ServerEndpoint,
    /// Set when a stop request ended the run early.
    pub interrupted: bool,
}

impl RunResult {
    pub fn final_eval(&self) -> EvalReport {
        self.evals.last().expect("runs end with an evaluation").1
    }
}

/// One step with both endpoints in this process. The server report takes
/// the same JSON round trip it takes over a socket.
pub fn local_step(client: &mut ClientEndpoint, server: &mut ServerEndpoint, step: usize) -> Result<RunMetrics> {
    let a = client.begin_step(step)?;
    let b = server.on_forward(&a)?;
    let c = client.on_forward(&b)?;
    let (d, report) = server.on_backward(&c)?;
    let report: ServerReport = serde_json::from_slice(&serde_json::to_vec(&report)?)?;
    client.finish_step(&d, &report)
}

pub fn evaluate_local(client: &mut ClientEndpoint, server: &mut ServerEndpoint) -> Result<EvalReport> {
    let mut acc = EvalAccum::default();
    for k in 0..client.eval_batches() {
        let a = client.eval_begin(k)?;
        let b = server.on_forward(&a)?;
        client.eval_finish(&b, &mut acc)?;
    }
    acc.report()
}

/// Trains for `cfg.optim.steps` steps, evaluating every `cfg.eval_every`
/// steps and at the end.
pub fn train_local(cfg: &RunConfig, sink: Option<&MetricsSink>) -> Result<RunResult> {
    train_local_until(cfg, sink, None)
}

/// As [`train_local`], but stops after the current step once `stop` is set.
pub fn train_local_until(cfg: &RunConfig, sink: Option<&MetricsSink>, stop: Option<&AtomicBool>) -> Result<RunResult> {
    let mut client = ClientEndpoint::new(cfg)?;
    let mut server = ServerEndpoint::new(cfg)?;
    let mut metrics = Vec::with_capacity(cfg.optim.steps);
    let mut evals = Vec::new();
    let mut interrupted = false;
    for step in 0..cfg.optim.steps {
        if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            log::warn!("stop requested after {step} steps");
            interrupted = true;
            break;
        }
        let m = local_step(&mut client, &mut server, step)?;
        if let Some(s) = sink {
            s.push(&m)?;
        }
        log::debug!("step {step} loss {:.4} bits {:.3}", m.task_loss, m.mean_bits());
        metrics.push(m);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.optim.steps {
            evals.push((step + 1, evaluate_local(&mut client, &mut server)?));
        }
    }
    evals.push((metrics.len(), evaluate_local(&mut client, &mut server)?));
    Ok(RunResult {
        metrics,
        evals,
        client,
        server,
        interrupted,
    })
}

/// First step at which a site's mean bit-width left the band.
#[derive(Clone, Debug, PartialEq)]
pub struct GuardViolation {
    pub site: String,
    /// `None` when the site never reached its target.
    pub step: Option<usize>,
    pub mean_bits: f64,
}

/// Checks that once each site first reaches `target`, its mean bit-width
/// stays within `target ± tol` for every later step.
pub fn bit_trajectory_guard(history: &[RunMetrics], target: f64, tol: f64) -> std::result::Result<(), GuardViolation> {
    let Some(first) = history.first() else { return Ok(()) };
    for site in first.sites.iter().map(|s| s.site.clone()) {
        let series: Vec<(usize, f64)> = history
            .iter()
            .filter_map(|m| m.site(&site).map(|s| (m.step, s.mean_bits)))
            .collect();
        let Some(start) = series.iter().position(|&(_, b)| b <= target) else {
            return Err(GuardViolation {
                site,
                step: None,
                mean_bits: series.last().map_or(f64::NAN, |s| s.1),
            });
        };
        if let Some(&(step, b)) = series[start..].iter().find(|&&(_, b)| (b - target).abs() > tol) {
            return Err(GuardViolation {
                site,
                step: Some(step),
                mean_bits: b,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SiteMetric;

    fn hist(bits: &[f64]) -> Vec<RunMetrics> {
        bits.iter()
            .enumerate()
            .map(|(i, &b)| RunMetrics {
                step: i,
                task_loss: 0.0,
                bits_loss: 0.0,
                sites: vec![SiteMetric {
                    site: "act0".into(),
                    mean_bits: b,
                    bits_loss: 0.0,
                }],
                bytes_tx: 0,
                bytes_rx: 0,
                wall_ms: 0.0,
            })
            .collect()
    }

    #[test]
    fn oscillation_inside_band_is_ok() {
        let mut b = vec![8.0, 6.0, 4.0];
        b.extend((0..20).map(|i| if i % 2 == 0 { 4.05 } else { 3.95 }));
        assert_eq!(bit_trajectory_guard(&hist(&b), 4.0, 0.1), Ok(()));
    }

    #[test]
    fn dip_is_reported_with_its_step() {
        let v = bit_trajectory_guard(&hist(&[8.0, 4.0, 4.02, 3.8, 4.0]), 4.0, 0.1).unwrap_err();
        assert_eq!(v.step, Some(3));
        assert_eq!(v.mean_bits, 3.8);
    }
}
