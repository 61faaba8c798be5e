//! Bulk-synchronous parameter-server simulation on a virtual clock.
//!
//! One iteration runs the full worker/server choreography:
//!
//! 1. every worker computes gradient and loss on its next local batch;
//! 2. workers push their losses, the server averages them;
//! 3. on iterations with `m % cadence == 0` the bit policy is consulted,
//!    otherwise the previous bit width is re-sent;
//! 4. workers quantize their gradients and push them;
//! 5. the server dequantizes, averages, re-quantizes and broadcasts;
//! 6. workers dequantize the global gradient and take an SGD step.
//!
//! Nothing here touches the real clock. Time advances only through
//! [`advance_clock`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, QuantizedTensor};
use crate::error::{Error, Result};
use crate::model::{compute_grad_loss, sgd_step, Batch, ModelSpec, ParamVector};
use crate::policy::{BitPolicy, PolicyInput};

/// Bytes in a worker's loss report.
pub const LOSS_MSG_BYTES: u64 = 4;
/// Bytes in the server's bit-width control message.
pub const CONTROL_MSG_BYTES: u64 = 1;
/// Value of the trace `bits` column when quantization is bypassed.
pub const PASSTHROUGH_BITS: u8 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub num_workers: usize,
    /// Per-link bandwidth in bytes per second.
    pub bandwidth_bytes_per_s: f64,
    /// One-way latency charged to every message.
    pub latency_ms: f64,
    pub compute_ms_per_iter: f64,
    /// Codec cost per 1000 elements encoded or decoded.
    pub quantize_ms_per_kelem: f64,
    /// Charged on every controller step of a learned policy.
    pub mdp_ms_per_step: f64,
    pub max_iters: usize,
    /// Policy cadence: bits may change only when `iter % cadence == 0`.
    pub cadence: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Pushes queue on the server's ingress link when true, run concurrently
    /// when false.
    pub serial_ingress: bool,
    /// Send raw f32 gradients, ignoring the policy's bit width.
    pub passthrough: bool,
    /// Per-layer flag selecting which layers are quantized. `None` quantizes
    /// the whole flattened gradient; excluded layers travel as raw f32.
    pub quantize_layers: Option<Vec<bool>>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            num_workers: 8,
            bandwidth_bytes_per_s: 10.0e6,
            latency_ms: 0.01,
            compute_ms_per_iter: 0.2,
            quantize_ms_per_kelem: 0.005,
            mdp_ms_per_step: 1.0,
            max_iters: 2000,
            cadence: 5,
            batch_size: 32,
            lr: 0.2,
            serial_ingress: true,
            passthrough: false,
            quantize_layers: None,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.num_workers == 0 {
            return Err(Error::config("cluster.num_workers", "must be at least 1"));
        }
        if !pos(self.bandwidth_bytes_per_s) {
            return Err(Error::config("cluster.bandwidth_bytes_per_s", "must be positive"));
        }
        for (name, v) in [
            ("cluster.latency_ms", self.latency_ms),
            ("cluster.compute_ms_per_iter", self.compute_ms_per_iter),
            ("cluster.quantize_ms_per_kelem", self.quantize_ms_per_kelem),
            ("cluster.mdp_ms_per_step", self.mdp_ms_per_step),
        ] {
            if !nonneg(v) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::config("cluster.max_iters", "must be at least 1"));
        }
        if self.cadence == 0 {
            return Err(Error::config("cluster.cadence", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("cluster.batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("cluster.lr", "must be positive"));
        }
        if let Some(mask) = &self.quantize_layers {
            if mask.len() != model.num_layers() {
                return Err(Error::config(
                    "cluster.quantize_layers",
                    format!("{} flags for {} layers", mask.len(), model.num_layers()),
                ));
            }
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub sim_time_ms: f64,
    pub loss: f64,
    pub bits: u8,
    pub bytes: u64,
    pub mdp_t: Option<usize>,
    pub action: Option<u8>,
    pub reward: Option<f64>,
}

/// Mean of the per-worker losses, in worker-index order.
pub fn aggregate_losses(local: &[f32], num_workers: usize) -> Result<f64> {
    if local.len() != num_workers {
        return Err(Error::Protocol(format!(
            "{} loss reports from {num_workers} workers",
            local.len()
        )));
    }
    if local.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("worker loss".into()));
    }
    Ok(local.iter().map(|&l| f64::from(l)).sum::<f64>() / num_workers as f64)
}

/// Elementwise mean of the workers' gradients, accumulated in f64.
pub fn aggregate_gradients(grads: &[ParamVector]) -> Result<ParamVector> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Protocol("no gradients to aggregate".into()))?;
    let len = first.len();
    if let Some(bad) = grads.iter().find(|g| g.len() != len) {
        return Err(Error::Protocol(format!(
            "gradient length {} vs {len}",
            bad.len()
        )));
    }
    let mut sum = vec![0.0f64; len];
    for g in grads {
        for (s, &v) in sum.iter_mut().zip(g.values()) {
            *s += f64::from(v);
        }
    }
    let p = grads.len() as f64;
    first.with_values(sum.into_iter().map(|s| (s / p) as f32).collect())
}

/// Transfer time of one message: latency plus serialization at link bandwidth.
pub fn comm_time_ms(bytes: u64, cfg: &ClusterConfig) -> f64 {
    cfg.latency_ms + bytes as f64 / cfg.bandwidth_bytes_per_s * 1000.0
}

/// Messages and work performed in one iteration, as seen by the clock.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationEvents {
    pub loss_pushes: Vec<u64>,
    pub control_broadcast: Option<u64>,
    pub grad_pushes: Vec<u64>,
    pub grad_broadcast: Option<u64>,
    /// Elements passing through an encoder or decoder on the critical path.
    pub codec_elems: usize,
    pub controller_step: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClockDelta {
    pub compute_ms: f64,
    pub codec_ms: f64,
    pub mdp_ms: f64,
    pub comm_ms: f64,
}

impl ClockDelta {
    pub fn total(&self) -> f64 {
        self.compute_ms + self.codec_ms + self.mdp_ms + self.comm_ms
    }
}

fn push_phase(sizes: &[u64], cfg: &ClusterConfig) -> f64 {
    let times = sizes.iter().map(|&b| comm_time_ms(b, cfg));
    if cfg.serial_ingress {
        times.sum()
    } else {
        times.fold(0.0, f64::max)
    }
}

pub fn advance_clock(ev: &IterationEvents, cfg: &ClusterConfig) -> ClockDelta {
    let broadcast = |b: Option<u64>| b.map_or(0.0, |b| comm_time_ms(b, cfg));
    ClockDelta {
        compute_ms: cfg.compute_ms_per_iter,
        codec_ms: cfg.quantize_ms_per_kelem * ev.codec_elems as f64 / 1000.0,
        mdp_ms: if ev.controller_step { cfg.mdp_ms_per_step } else { 0.0 },
        comm_ms: push_phase(&ev.loss_pushes, cfg)
            + broadcast(ev.control_broadcast)
            + push_phase(&ev.grad_pushes, cfg)
            + broadcast(ev.grad_broadcast),
    }
}

/// How a gradient vector is split between quantized and raw f32 elements.
#[derive(Debug, Clone, PartialEq)]
pub struct GradLayout {
    /// Sorted, non-overlapping element ranges that get quantized.
    quantized: Vec<std::ops::Range<usize>>,
    len: usize,
}

impl GradLayout {
    pub fn new(model: &ModelSpec, mask: Option<&[bool]>) -> Self {
        let len = model.num_params();
        let quantized = match mask {
            None => vec![0..len],
            Some(mask) => (0..model.num_layers())
                .filter(|&l| mask[l])
                .map(|l| model.layer_range(l))
                .collect(),
        };
        Self { quantized, len }
    }

    pub fn quantized_len(&self) -> usize {
        self.quantized.iter().map(|r| r.len()).sum()
    }

    pub fn raw_len(&self) -> usize {
        self.len - self.quantized_len()
    }

    /// Bytes of one gradient message at `bits` (or raw, for passthrough).
    pub fn message_bytes(&self, bits: u8) -> u64 {
        if bits == PASSTHROUGH_BITS {
            return 4 * self.len as u64;
        }
        let q = self.quantized_len();
        let quant = if q == 0 { 0 } else { codec::encoded_size_bytes(q, bits) };
        (quant + 4 * self.raw_len()) as u64
    }

    /// Elements run through the codec when one message is encoded or decoded.
    pub fn codec_elems(&self, bits: u8) -> usize {
        if bits == PASSTHROUGH_BITS {
            0
        } else {
            self.quantized_len()
        }
    }

    fn encode(&self, values: &[f32], bits: u8) -> Result<EncodedGrad> {
        if bits == PASSTHROUGH_BITS {
            return Ok(EncodedGrad {
                quantized: None,
                raw: values.to_vec(),
            });
        }
        let mut q = Vec::with_capacity(self.quantized_len());
        let mut raw = Vec::with_capacity(self.raw_len());
        let mut cursor = 0;
        for r in &self.quantized {
            raw.extend_from_slice(&values[cursor..r.start]);
            q.extend_from_slice(&values[r.clone()]);
            cursor = r.end;
        }
        raw.extend_from_slice(&values[cursor..]);
        let quantized = if q.is_empty() {
            None
        } else {
            Some(codec::quantize(&q, bits)?)
        };
        Ok(EncodedGrad { quantized, raw })
    }

    fn decode(&self, enc: &EncodedGrad) -> Result<Vec<f32>> {
        let q = match &enc.quantized {
            Some(qt) => codec::dequantize(qt)?,
            None if enc.raw.len() == self.len => return Ok(enc.raw.clone()),
            None => Vec::new(),
        };
        let mut out = Vec::with_capacity(self.len);
        let (mut qi, mut ri) = (q.into_iter(), enc.raw.iter().copied());
        let mut cursor = 0;
        for r in &self.quantized {
            out.extend(ri.by_ref().take(r.start - cursor));
            out.extend(qi.by_ref().take(r.len()));
            cursor = r.end;
        }
        out.extend(ri);
        if out.len() != self.len {
            return Err(Error::Protocol(format!(
                "decoded {} elements, expected {}",
                out.len(),
                self.len
            )));
        }
        Ok(out)
    }
}

struct EncodedGrad {
    quantized: Option<QuantizedTensor>,
    raw: Vec<f32>,
}

/// Bytes moved in one iteration at `bits`: `P` pushes plus one multicast of
/// the gradient, `P` loss reports up and `P` control bytes down.
pub fn iteration_bytes(layout: &GradLayout, bits: u8, num_workers: usize) -> u64 {
    let p = num_workers as u64;
    (p + 1) * layout.message_bytes(bits) + p * (LOSS_MSG_BYTES + CONTROL_MSG_BYTES)
}

/// Round-robin shard of `train` for worker `p`.
pub fn shard_indices(n: usize, num_workers: usize, p: usize) -> Vec<usize> {
    (p..n).step_by(num_workers).collect()
}

struct Worker {
    params: ParamVector,
    shard: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Worker {
    /// Next `batch_size` rows of the shard. A batch at least as large as the
    /// shard is the whole shard in index order every iteration.
    fn next_batch(&mut self, train: &Batch, batch_size: usize) -> Batch {
        if batch_size >= self.shard.len() {
            return train.select(&self.shard);
        }
        let mut picked = Vec::with_capacity(batch_size);
        while picked.len() < batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        train.select(&picked)
    }
}

/// Everything an observer can see after an iteration completes.
pub struct IterationView<'a> {
    pub record: &'a TraceRecord,
    /// Parameters after the update (identical on every worker).
    pub params: &'a ParamVector,
    /// RMS of the dequantized global gradient applied this iteration.
    pub global_grad_rms: f64,
    pub clock: ClockDelta,
}

pub fn run_training(
    cluster: &ClusterConfig,
    model: &ModelSpec,
    train: &Batch,
    policy: &mut dyn BitPolicy,
    seed: u64,
) -> Result<Vec<TraceRecord>> {
    run_training_with(cluster, model, train, policy, seed, |_| Ok(()))
}

/// Runs `cluster.max_iters` BSP iterations, calling `observe` after each.
///
/// A non-finite loss aborts with [`Error::Diverged`] carrying the trace up to
/// the last finite iteration.
pub fn run_training_with<F>(
    cluster: &ClusterConfig,
    model: &ModelSpec,
    train: &Batch,
    policy: &mut dyn BitPolicy,
    seed: u64,
    mut observe: F,
) -> Result<Vec<TraceRecord>>
where
    F: FnMut(&IterationView<'_>) -> Result<()>,
{
    model.validate()?;
    cluster.validate(model)?;
    let p_count = cluster.num_workers;
    if train.len() < p_count {
        return Err(Error::config(
            "data.n",
            format!("{} training rows for {p_count} workers", train.len()),
        ));
    }
    let layout = GradLayout::new(model, cluster.quantize_layers.as_deref());

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let params0 = model.init_params(&mut init_rng);
    let mut workers: Vec<Worker> = (0..p_count)
        .map(|p| {
            let shard = shard_indices(train.len(), p_count, p);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64 + 1);
            let mut order = shard.clone();
            order.shuffle(&mut rng);
            Worker {
                params: params0.clone(),
                shard,
                order,
                cursor: 0,
                rng,
            }
        })
        .collect();

    let mut trace: Vec<TraceRecord> = Vec::with_capacity(cluster.max_iters);
    let mut clock_ms = 0.0f64;
    let mut last_consult_ms = 0.0f64;
    let mut window: Vec<f64> = Vec::with_capacity(cluster.cadence);
    let mut bits: Option<u8> = None;
    let mut last_rms: Option<f64> = None;

    for m in 0..cluster.max_iters {
        let diverged = |trace: Vec<TraceRecord>| Error::Diverged {
            iter: m,
            partial: Box::new(trace),
        };

        // (1) local gradients and losses
        let batches: Vec<Batch> = workers
            .iter_mut()
            .map(|w| w.next_batch(train, cluster.batch_size))
            .collect();
        let local: Vec<Result<(ParamVector, f32)>> = workers
            .par_iter()
            .zip(batches.par_iter())
            .map(|(w, b)| compute_grad_loss(&w.params, model, b))
            .collect();
        let mut grads = Vec::with_capacity(p_count);
        let mut losses = Vec::with_capacity(p_count);
        for r in local {
            match r {
                Ok((g, l)) => {
                    grads.push(g);
                    losses.push(l);
                }
                Err(Error::NonFinite(_)) => return Err(diverged(trace)),
                Err(e) => return Err(e),
            }
        }

        // (2) global loss
        let global_loss = match aggregate_losses(&losses, p_count) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(diverged(trace)),
            Err(e) => return Err(e),
        };
        window.push(global_loss);

        // (3) bit width
        let mut mdp_t = None;
        let mut action = None;
        let mut reward = None;
        let mut controller_step = false;
        if m % cluster.cadence == 0 {
            let t = m / cluster.cadence;
            let decision = policy.decide(&PolicyInput {
                iter: m,
                step: t,
                losses: &window,
                cost_ms: clock_ms - last_consult_ms,
                grad_rms: last_rms,
            })?;
            if !(codec::MIN_BITS..=codec::MAX_BITS).contains(&decision.bits) {
                return Err(Error::Protocol(format!(
                    "policy returned {} bits",
                    decision.bits
                )));
            }
            bits = Some(decision.bits);
            mdp_t = Some(t);
            action = decision.action;
            reward = decision.reward;
            controller_step = policy.runs_controller();
            window.clear();
            last_consult_ms = clock_ms;
        }
        let policy_bits = bits.ok_or_else(|| Error::Protocol("no bit width before first use".into()))?;
        let k = if cluster.passthrough {
            PASSTHROUGH_BITS
        } else {
            policy_bits
        };

        // (4) workers encode and push
        let pushed: Vec<EncodedGrad> = grads
            .iter()
            .map(|g| layout.encode(g.values(), k))
            .collect::<Result<_>>()?;

        // (5) server decodes, averages in worker order, re-encodes
        let decoded: Vec<ParamVector> = pushed
            .iter()
            .map(|e| layout.decode(e).and_then(|v| params0.with_values(v)))
            .collect::<Result<_>>()?;
        let global = aggregate_gradients(&decoded)?;
        let broadcast = layout.encode(global.values(), k)?;

        // (6) workers decode and apply
        let applied = params0.with_values(layout.decode(&broadcast)?)?;
        for w in workers.iter_mut() {
            w.params = sgd_step(&w.params, &applied, cluster.lr)?;
        }
        let reference = &workers[0].params;
        if let Some(p) = workers
            .iter()
            .position(|w| w.params.values().iter().zip(reference.values()).any(|(a, b)| a.to_bits() != b.to_bits()))
        {
            return Err(Error::Protocol(format!(
                "worker {p} parameters diverged from worker 0 at iteration {m}"
            )));
        }
        if !reference.is_finite() {
            return Err(diverged(trace));
        }

        let msg = layout.message_bytes(k);
        let events = IterationEvents {
            loss_pushes: vec![LOSS_MSG_BYTES; p_count],
            control_broadcast: Some(CONTROL_MSG_BYTES),
            grad_pushes: vec![msg; p_count],
            grad_broadcast: Some(msg),
            // worker encode (parallel), P server decodes, server encode, worker decode
            codec_elems: (p_count + 3) * layout.codec_elems(k),
            controller_step,
        };
        let delta = advance_clock(&events, cluster);
        clock_ms += delta.total();

        let record = TraceRecord {
            iter: m,
            sim_time_ms: clock_ms,
            loss: global_loss,
            bits: k,
            bytes: iteration_bytes(&layout, k, p_count),
            mdp_t,
            action,
            reward,
        };
        let rms = applied.rms();
        last_rms = Some(rms);
        observe(&IterationView {
            record: &record,
            params: &workers[0].params,
            global_grad_rms: rms,
            clock: delta,
        })?;
        trace.push(record);
    }
    Ok(trace)
}
