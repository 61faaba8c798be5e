//! Bit-width policies consulted by the simulated server every `cadence`
//! iterations.

use crate::codec::{MAX_BITS, MIN_BITS};
use crate::error::{Error, Result};
use crate::mdp::{MdpController, MdpHyper, QNetParams};

/// What the server knows when it consults the policy.
#[derive(Debug, Clone)]
pub struct PolicyInput<'a> {
    pub iter: usize,
    /// Consultation index, `iter / cadence`.
    pub step: usize,
    /// Global losses observed since the previous consultation, oldest first.
    /// Includes the current iteration's loss.
    pub losses: &'a [f64],
    /// Simulated time since the previous consultation.
    pub cost_ms: f64,
    /// RMS of the last applied global gradient; `None` before the first update.
    pub grad_rms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub bits: u8,
    pub action: Option<u8>,
    pub reward: Option<f64>,
}

impl Decision {
    pub fn bits(bits: u8) -> Self {
        Self {
            bits,
            action: None,
            reward: None,
        }
    }
}

pub trait BitPolicy: Send {
    fn decide(&mut self, input: &PolicyInput<'_>) -> Result<Decision>;

    /// Short label used in tables, e.g. `Fix(8)`.
    fn name(&self) -> String;

    /// Whether a consultation runs a learned controller whose cost is charged
    /// to the clock.
    fn runs_controller(&self) -> bool {
        false
    }

    /// Current Q-network, for policies that learn one.
    fn q_params(&self) -> Option<&QNetParams> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct FixedPolicy {
    bits: u8,
}

impl FixedPolicy {
    pub fn new(bits: u8) -> Result<Self> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::config(
                "policy.bits",
                format!("{bits} outside [{MIN_BITS},{MAX_BITS}]"),
            ));
        }
        Ok(Self { bits })
    }
}

impl BitPolicy for FixedPolicy {
    fn decide(&mut self, _input: &PolicyInput<'_>) -> Result<Decision> {
        Ok(Decision::bits(self.bits))
    }

    fn name(&self) -> String {
        format!("Fix({})", self.bits)
    }
}

/// More bits for larger gradients: `K = 2 + #{thresholds below RMS}`.
#[derive(Debug, Clone)]
pub struct AdaptiveNormPolicy {
    thresholds: [f64; 6],
}

impl AdaptiveNormPolicy {
    pub fn new(thresholds: &[f64]) -> Result<Self> {
        let thresholds: [f64; 6] = thresholds.try_into().map_err(|_| {
            Error::config(
                "policy.thresholds",
                format!("need exactly 6 cut points, got {}", thresholds.len()),
            )
        })?;
        if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "policy.thresholds",
                "cut points must be finite and strictly ascending",
            ));
        }
        Ok(Self { thresholds })
    }

    pub fn thresholds(&self) -> &[f64; 6] {
        &self.thresholds
    }

    pub fn bits_for(&self, rms: f64) -> u8 {
        let above = self.thresholds.iter().filter(|&&t| t < rms).count() as u8;
        (MIN_BITS + above).clamp(MIN_BITS, MAX_BITS)
    }
}

impl BitPolicy for AdaptiveNormPolicy {
    fn decide(&mut self, input: &PolicyInput<'_>) -> Result<Decision> {
        // Before any gradient has been seen, be conservative.
        Ok(Decision::bits(input.grad_rms.map_or(MAX_BITS, |r| self.bits_for(r))))
    }

    fn name(&self) -> String {
        "Adaptive".into()
    }
}

/// Cut points at the 1/7 .. 6/7 quantiles of observed gradient RMS values,
/// nudged apart so they are strictly ascending.
pub fn calibrate_thresholds(rms: &[f64]) -> Result<[f64; 6]> {
    let mut sorted: Vec<f64> = rms.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return Err(Error::config("policy.warmup_iters", "warmup produced no gradient statistics"));
    }
    sorted.sort_by(f64::total_cmp);
    let mut out = [0.0; 6];
    for (k, slot) in out.iter_mut().enumerate() {
        let pos = (k + 1) as f64 / 7.0 * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let frac = pos - lo as f64;
        *slot = sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
    }
    for k in 1..6 {
        if out[k] <= out[k - 1] {
            out[k] = f64::from_bits(out[k - 1].to_bits() + 1).max(out[k - 1] * (1.0 + 1e-9));
        }
    }
    Ok(out)
}

/// Adapter running an [`MdpController`] once per consultation.
#[derive(Debug, Clone)]
pub struct MqgradPolicy {
    controller: MdpController,
}

impl MqgradPolicy {
    pub fn new(hyper: MdpHyper, window: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            controller: MdpController::new(hyper, window, seed)?,
        })
    }

    pub fn from_controller(controller: MdpController) -> Self {
        Self { controller }
    }

}

impl BitPolicy for MqgradPolicy {
    fn decide(&mut self, input: &PolicyInput<'_>) -> Result<Decision> {
        if input.step != self.controller.steps_taken() {
            return Err(Error::Protocol(format!(
                "controller at step {} consulted for step {}",
                self.controller.steps_taken(),
                input.step
            )));
        }
        let out = self.controller.step(input.losses, input.cost_ms)?;
        Ok(Decision {
            bits: out.bits,
            action: Some(out.action),
            reward: out.reward,
        })
    }

    fn name(&self) -> String {
        "MQGrad".into()
    }

    fn runs_controller(&self) -> bool {
        true
    }

    fn q_params(&self) -> Option<&QNetParams> {
        Some(self.controller.params())
    }
}
