//! Post-processing of a run's trace into its summary.
//!
//! Everything here is a pure function of the trace, the probe log and the
//! resolved config, so re-running it on files read back from disk gives the
//! same summary the run emitted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{GradLayout, TraceRecord};
use crate::error::{Error, Result};
use crate::experiment::config::{ExperimentConfig, PolicyConfig};

/// Losses averaged into `final_loss`.
pub const FINAL_LOSS_TAIL: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// Completed iterations at probe time.
    pub iter: usize,
    pub sim_time_ms: f64,
    pub test_accuracy: f64,
    /// Full training-set loss.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub seed: u64,
    pub iterations: usize,
    pub diverged: bool,
    /// Mean global loss over the last `FINAL_LOSS_TAIL` iterations.
    pub final_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub best_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub accuracy_probes: Vec<Probe>,
    pub total_sim_ms: f64,
    pub total_bytes: u64,
    /// Gradient message bytes only, excluding loss and control messages.
    pub payload_bytes: u64,
    pub codec_ms: f64,
    pub mdp_ms: f64,
    /// `(codec_ms + mdp_ms) / total_sim_ms`.
    pub quantization_overhead_fraction: f64,
    /// Bit width chosen at each policy consultation.
    pub bits_by_step: Vec<u8>,
}

pub fn policy_label(policy: &PolicyConfig) -> String {
    match policy {
        PolicyConfig::Fixed(f) => format!("Fix({})", f.bits),
        PolicyConfig::Adaptive(_) => "Adaptive".into(),
        PolicyConfig::Mqgrad(_) => "MQGrad".into(),
    }
}

pub fn summarize(cfg: &ExperimentConfig, trace: &[TraceRecord], probes: &[Probe]) -> Summary {
    let c = &cfg.cluster;
    let p = c.num_workers;
    let layout = GradLayout::new(&cfg.model, c.quantize_layers.as_deref());
    let learned = matches!(cfg.policy, PolicyConfig::Mqgrad(_));

    let mut codec_ms = 0.0;
    let mut mdp_ms = 0.0;
    let mut payload = 0u64;
    for r in trace {
        codec_ms += c.quantize_ms_per_kelem * ((p + 3) * layout.codec_elems(r.bits)) as f64 / 1000.0;
        if learned && r.mdp_t.is_some() {
            mdp_ms += c.mdp_ms_per_step;
        }
        payload += (p as u64 + 1) * layout.message_bytes(r.bits);
    }
    let total_sim_ms = trace.last().map_or(0.0, |r| r.sim_time_ms);
    let tail = &trace[trace.len().saturating_sub(FINAL_LOSS_TAIL)..];
    let final_loss = (!tail.is_empty())
        .then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64);

    Summary {
        policy: policy_label(&cfg.policy),
        seed: cfg.seed,
        iterations: trace.len(),
        diverged: trace.len() < c.max_iters,
        final_loss,
        last_loss: trace.last().map(|r| r.loss),
        best_loss: trace.iter().map(|r| r.loss).min_by(f64::total_cmp),
        final_accuracy: probes.last().map(|p| p.test_accuracy),
        accuracy_probes: probes.to_vec(),
        total_sim_ms,
        total_bytes: trace.iter().map(|r| r.bytes).sum(),
        payload_bytes: payload,
        codec_ms,
        mdp_ms,
        quantization_overhead_fraction: if total_sim_ms > 0.0 {
            (codec_ms + mdp_ms) / total_sim_ms
        } else {
            0.0
        },
        bits_by_step: trace.iter().filter(|r| r.mdp_t.is_some()).map(|r| r.bits).collect(),
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub const TRACE_HEADER: [&str; 8] = [
    "iter",
    "sim_time_ms",
    "loss",
    "bits",
    "bytes",
    "mdp_t",
    "action",
    "reward",
];
pub const PROBE_HEADER: [&str; 4] = ["iter", "sim_time_ms", "test_accuracy", "train_loss"];

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    write_csv(path, trace, &TRACE_HEADER)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    read_csv(path)
}

/// Rebuilds the summary of a finished run from `trace.csv` and the
/// `config.toml` / `probes.csv` written next to it.
pub fn summarize_dir(trace_path: &Path) -> Result<Summary> {
    let dir = trace_path.parent().unwrap_or(Path::new("."));
    let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
    let trace = read_trace(trace_path)?;
    let probes_path = dir.join("probes.csv");
    let probes = if probes_path.exists() {
        read_csv(&probes_path)?
    } else {
        Vec::new()
    };
    Ok(summarize(&cfg, &trace, &probes))
}
