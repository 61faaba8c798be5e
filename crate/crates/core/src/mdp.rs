//! Learned bit-width controller: an MDP over smoothed loss windows whose
//! action-value function is a small ReLU network trained on-policy with
//! SARSA.
//!
//! One controller step runs every `window` training iterations. The state is
//! the current bit width plus the window of exponentially smoothed global
//! losses; the actions are "keep" (0) and "add one bit" (1). The reward for
//! the previous action is the negated least-squares slope of the smoothed
//! losses, scaled and divided by the simulated time those iterations took.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 2;
pub const KEEP: u8 = 0;
pub const INCREASE: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpHyper {
    /// Moving-average weight on the newest loss.
    pub alpha: f64,
    pub epsilon: f64,
    /// SARSA step size.
    pub eta: f64,
    /// Reward scale.
    pub gamma_scale: f64,
    /// SARSA discount.
    pub gamma_discount: f64,
    pub bit_min: u8,
    pub bit_max: u8,
    pub hidden: usize,
    /// Half-width of the uniform initialization of the Q-network.
    pub init_scale: f64,
}

impl Default for MdpHyper {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            epsilon: 0.1,
            eta: 0.1,
            gamma_scale: 300.0,
            gamma_discount: 0.9,
            bit_min: 2,
            bit_max: 8,
            hidden: 10,
            init_scale: 0.05,
        }
    }
}

impl MdpHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("policy.alpha", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("policy.epsilon", "must lie in [0, 1]"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config("policy.eta", "must be finite and non-negative"));
        }
        if !(self.gamma_scale.is_finite() && self.gamma_scale > 0.0) {
            return Err(Error::config("policy.gamma_scale", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma_discount) {
            return Err(Error::config("policy.gamma_discount", "must lie in [0, 1]"));
        }
        if !(crate::codec::MIN_BITS <= self.bit_min
            && self.bit_min <= self.bit_max
            && self.bit_max <= crate::codec::MAX_BITS)
        {
            return Err(Error::config(
                "policy.bit_min",
                "need 2 <= bit_min <= bit_max <= 8",
            ));
        }
        if self.hidden == 0 {
            return Err(Error::config("policy.hidden", "must be positive"));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::config("policy.init_scale", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpState {
    /// Bit width the state's Q-values are about.
    pub n: u8,
    pub smoothed: Vec<f64>,
}

/// Exponential smoothing of one window, continuing from the last smoothed
/// value of the previous window.
pub fn smooth_losses(raw: &[f64], alpha: f64, prev_last: f64) -> Vec<f64> {
    let mut prev = prev_last;
    raw.iter()
        .map(|&l| {
            prev = alpha * l + (1.0 - alpha) * prev;
            prev
        })
        .collect()
}

/// Least-squares line `beta * i + b` through `(i, y[i-1])` for `i = 1..=len`.
pub fn fit_slope(y: &[f64]) -> Result<(f64, f64)> {
    if y.len() < 2 {
        return Err(Error::Dimension(format!("slope needs >= 2 points, got {}", y.len())));
    }
    let n = y.len() as f64;
    let i_mean = (n + 1.0) / 2.0;
    let y_mean = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (k, &v) in y.iter().enumerate() {
        let di = (k + 1) as f64 - i_mean;
        sxy += di * (v - y_mean);
        sxx += di * di;
    }
    let beta = sxy / sxx;
    Ok((beta, y_mean - beta * i_mean))
}

/// `-beta * gamma_scale / cost_ms`: positive when the loss falls.
pub fn reward(beta: f64, cost_ms: f64, gamma_scale: f64) -> Result<f64> {
    if cost_ms.is_nan() || cost_ms <= 0.0 {
        return Err(Error::Dimension(format!("reward cost must be positive, got {cost_ms}")));
    }
    Ok(-beta * gamma_scale / cost_ms)
}

/// Greedy action with ties going to [`KEEP`].
pub fn greedy(q: [f64; 2]) -> u8 {
    if q[0] >= q[1] {
        KEEP
    } else {
        INCREASE
    }
}

/// Epsilon-greedy over two actions: the non-greedy action with probability
/// `epsilon`, the greedy one otherwise.
pub fn select_action<R: Rng + ?Sized>(q: [f64; 2], epsilon: f64, rng: &mut R) -> u8 {
    let g = greedy(q);
    let u: f64 = rng.random();
    if u < epsilon {
        1 - g
    } else {
        g
    }
}

/// An action-value function differentiable in its flat parameter vector.
pub trait ActionValue {
    fn q(&self, input: &[f64], action: u8) -> Result<f64>;
    /// Gradient of `q(input, action)` with respect to the parameters.
    fn grad(&self, input: &[f64], action: u8) -> Result<Vec<f64>>;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
}

/// `input -> ReLU(hidden) -> linear(2)`.
///
/// Flat layout: `w1 (hidden x input)`, `b1 (hidden)`, `w2 (2 x hidden)`, `b2 (2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetParams {
    pub input: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub params: Vec<f64>,
}

impl QNetParams {
    pub fn num_params(input: usize, hidden: usize) -> usize {
        hidden * input + hidden + NUM_ACTIONS * hidden + NUM_ACTIONS
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            outputs: NUM_ACTIONS,
            params: vec![0.0; Self::num_params(input, hidden)],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(input: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let params = (0..Self::num_params(input, hidden))
            .map(|_| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 })
            .collect();
        Self {
            input,
            hidden,
            outputs: NUM_ACTIONS,
            params,
        }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + NUM_ACTIONS * self.hidden;
        (b1, w2, b2)
    }

    fn hidden_layer(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input {
            return Err(Error::Dimension(format!(
                "q-network input {} vs {}",
                x.len(),
                self.input
            )));
        }
        let (b1, _, _) = self.offsets();
        Ok((0..self.hidden)
            .map(|h| {
                let row = &self.params[h * self.input..(h + 1) * self.input];
                let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.params[b1 + h];
                z.max(0.0)
            })
            .collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<[f64; 2]> {
        let h = self.hidden_layer(x)?;
        let (_, w2, b2) = self.offsets();
        let mut out = [0.0; 2];
        for (a, o) in out.iter_mut().enumerate() {
            let row = &self.params[w2 + a * self.hidden..w2 + (a + 1) * self.hidden];
            *o = row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + self.params[b2 + a];
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("q-network output".into()));
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

impl ActionValue for QNetParams {
    fn q(&self, input: &[f64], action: u8) -> Result<f64> {
        Ok(self.forward(input)?[action as usize])
    }

    fn grad(&self, x: &[f64], action: u8) -> Result<Vec<f64>> {
        let h = self.hidden_layer(x)?;
        let (b1, w2, b2) = self.offsets();
        let a = action as usize;
        let mut g = vec![0.0; self.params.len()];
        for k in 0..self.hidden {
            g[w2 + a * self.hidden + k] = h[k];
            // ReLU passes gradient only where the unit is active.
            if h[k] > 0.0 {
                let upstream = self.params[w2 + a * self.hidden + k];
                for (i, &xi) in x.iter().enumerate() {
                    g[k * self.input + i] = upstream * xi;
                }
                g[b1 + k] = upstream;
            }
        }
        g[b2 + a] = 1.0;
        Ok(g)
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

/// Network input: smoothed losses divided by `loss_scale`.
pub fn features(state: &MdpState, loss_scale: f64) -> Vec<f64> {
    state.smoothed.iter().map(|l| l / loss_scale).collect()
}

pub fn q_forward(v: &QNetParams, state: &MdpState, loss_scale: f64) -> Result<[f64; 2]> {
    v.forward(&features(state, loss_scale))
}

/// Next state: bits grow by one iff the network preferred increasing in the
/// previous state (ties keep), capped at `bit_max`.
pub fn transition(
    prev: &MdpState,
    new_smoothed: Vec<f64>,
    v: &QNetParams,
    loss_scale: f64,
    bit_max: u8,
) -> Result<MdpState> {
    let a = greedy(q_forward(v, prev, loss_scale)?);
    Ok(MdpState {
        n: (prev.n + a).min(bit_max),
        smoothed: new_smoothed,
    })
}

/// One SARSA step: `v += eta * delta * dQ(s_prev, a_prev)/dv` with
/// `delta = r + discount * Q(s_t, a_t) - Q(s_prev, a_prev)`. Returns `delta`.
#[allow(clippy::too_many_arguments)]
pub fn sarsa_update<Q: ActionValue>(
    v: &mut Q,
    s_prev: &[f64],
    a_prev: u8,
    r: f64,
    s_t: &[f64],
    a_t: u8,
    eta: f64,
    discount: f64,
) -> Result<f64> {
    let q_prev = v.q(s_prev, a_prev)?;
    let q_next = v.q(s_t, a_t)?;
    let delta = r + discount * q_next - q_prev;
    if !delta.is_finite() {
        return Err(Error::NonFinite(format!("TD error {delta}")));
    }
    if delta == 0.0 || eta == 0.0 {
        return Ok(delta);
    }
    let g = v.grad(s_prev, a_prev)?;
    for (p, gi) in v.params_mut().iter_mut().zip(g) {
        *p += eta * delta * gi;
    }
    if v.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("q-network parameters after update".into()));
    }
    Ok(delta)
}

/// What one controller step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub t: usize,
    pub bits: u8,
    pub action: u8,
    /// Reward credited to the previous step's action; `None` at `t = 0`.
    pub reward: Option<f64>,
    pub td_error: Option<f64>,
}

/// The controller owned by the server: Q-network, previous (state, action)
/// and exploration RNG.
#[derive(Debug, Clone)]
pub struct MdpController {
    hyper: MdpHyper,
    window: usize,
    v: QNetParams,
    rng: ChaCha8Rng,
    t: usize,
    loss_scale: f64,
    prev: Option<(MdpState, u8)>,
    last_bits: u8,
}

impl MdpController {
    pub fn new(hyper: MdpHyper, window: usize, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if window < 2 {
            return Err(Error::config("cluster.cadence", "the controller needs a window of at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = QNetParams::uniform(window, hyper.hidden, hyper.init_scale, &mut rng);
        Ok(Self::with_params(hyper, window, v, rng))
    }

    /// Controller with explicit Q-network parameters.
    pub fn with_params(hyper: MdpHyper, window: usize, v: QNetParams, rng: ChaCha8Rng) -> Self {
        let last_bits = hyper.bit_min;
        Self {
            hyper,
            window,
            v,
            rng,
            t: 0,
            loss_scale: 1.0,
            prev: None,
            last_bits,
        }
    }

    pub fn params(&self) -> &QNetParams {
        &self.v
    }

    pub fn state(&self) -> Option<&MdpState> {
        self.prev.as_ref().map(|(s, _)| s)
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Runs one controller step on the global losses observed since the
    /// previous step and the simulated time they took.
    ///
    /// Step 0 bootstraps from the first observed loss: the window is filled
    /// with it, it becomes the feature scale, bits start at `bit_min`.
    pub fn step(&mut self, raw: &[f64], cost_ms: f64) -> Result<StepOutcome> {
        if raw.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("loss fed to controller".into()));
        }
        let t = self.t;
        let h = &self.hyper;
        let outcome = match self.prev.take() {
            None => {
                let first = *raw
                    .last()
                    .ok_or_else(|| Error::Dimension("controller needs at least one loss".into()))?;
                self.loss_scale = if first.abs() > f64::EPSILON { first.abs() } else { 1.0 };
                let s0 = MdpState {
                    n: h.bit_min,
                    smoothed: vec![first; self.window],
                };
                let q = q_forward(&self.v, &s0, self.loss_scale)?;
                let a0 = select_action(q, h.epsilon, &mut self.rng);
                let bits = (s0.n + a0).clamp(h.bit_min, h.bit_max);
                self.prev = Some((s0, a0));
                self.last_bits = bits;
                StepOutcome {
                    t,
                    bits,
                    action: a0,
                    reward: None,
                    td_error: None,
                }
            }
            Some((s_prev, a_prev)) => {
                if raw.len() != self.window {
                    return Err(Error::Dimension(format!(
                        "controller window {} but got {} losses",
                        self.window,
                        raw.len()
                    )));
                }
                let prev_last = *s_prev.smoothed.last().unwrap();
                let smoothed = smooth_losses(raw, h.alpha, prev_last);
                let s_t = transition(&s_prev, smoothed, &self.v, self.loss_scale, h.bit_max)?;
                let (beta, _) = fit_slope(&s_t.smoothed)?;
                let r = reward(beta, cost_ms, h.gamma_scale)?;
                let x_t = features(&s_t, self.loss_scale);
                let q = self.v.forward(&x_t)?;
                let a_t = select_action(q, h.epsilon, &mut self.rng);
                let x_prev = features(&s_prev, self.loss_scale);
                let delta = sarsa_update(
                    &mut self.v,
                    &x_prev,
                    a_prev,
                    r,
                    &x_t,
                    a_t,
                    h.eta,
                    h.gamma_discount,
                )?;
                // An explored increase is already on the wire; never take it back.
                let bits = (s_t.n + a_t).max(self.last_bits).clamp(h.bit_min, h.bit_max);
                self.prev = Some((s_t, a_t));
                self.last_bits = bits;
                StepOutcome {
                    t,
                    bits,
                    action: a_t,
                    reward: Some(r),
                    td_error: Some(delta),
                }
            }
        };
        self.t += 1;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth_losses(&[3.0, 1.0, 4.0], 1.0, 9.0), vec![3.0, 1.0, 4.0]);
        let one = smooth_losses(&[1.0], 0.01, 2.0);
        assert!((one[0] - 1.99).abs() < 1e-12);
        assert_eq!(smooth_losses(&[2.0, 2.0, 2.0], 0.5, 0.0), vec![1.0, 1.5, 1.75]);
    }

    #[test]
    fn slope_examples() {
        assert_eq!(fit_slope(&[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap(), (-1.0, 6.0));
        assert_eq!(fit_slope(&[3.0, 3.0, 3.0]).unwrap(), (0.0, 3.0));
        let (beta, b) = fit_slope(&[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!((beta - 0.6).abs() < 1e-12 && (b - 0.5).abs() < 1e-12);
        assert!(fit_slope(&[1.0]).is_err());
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(0.0, 10.0, 300.0).unwrap(), 0.0);
        assert!((reward(-1.0, 1000.0, 300.0).unwrap() - 0.3).abs() < 1e-12);
        assert!((reward(0.5, 500.0, 300.0).unwrap() + 0.3).abs() < 1e-12);
        assert!(reward(-1.0, 0.0, 300.0).is_err());
        assert!(reward(-1.0, -5.0, 300.0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let v = QNetParams::zeros(5, 10);
        let s = MdpState {
            n: 2,
            smoothed: vec![1.0, 0.9, 0.8, 0.7, 0.6],
        };
        assert_eq!(q_forward(&v, &s, 1.0).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn forward_matches_matrix_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = QNetParams::uniform(5, 10, 0.5, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
        // Independent: build explicit matrices, then multiply.
        let mut w1 = [[0.0; 5]; 10];
        let mut b1 = [0.0; 10];
        let mut w2 = [[0.0; 10]; 2];
        let mut b2 = [0.0; 2];
        let mut it = v.params.iter().copied();
        for row in w1.iter_mut() {
            for c in row.iter_mut() {
                *c = it.next().unwrap();
            }
        }
        for c in b1.iter_mut() {
            *c = it.next().unwrap();
        }
        for row in w2.iter_mut() {
            for c in row.iter_mut() {
                *c = it.next().unwrap();
            }
        }
        for c in b2.iter_mut() {
            *c = it.next().unwrap();
        }
        assert!(it.next().is_none());
        let mut h = [0.0; 10];
        for j in 0..10 {
            let mut s = b1[j];
            for i in 0..5 {
                s += w1[j][i] * x[i];
            }
            h[j] = if s > 0.0 { s } else { 0.0 };
        }
        let got = v.forward(&x).unwrap();
        for a in 0..2 {
            let mut s = b2[a];
            for j in 0..10 {
                s += w2[a][j] * h[j];
            }
            assert!((got[a] - s).abs() < 1e-6);
        }
        assert_eq!(got, v.forward(&x).unwrap());
    }

    #[test]
    fn action_selection_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(select_action([0.7, 0.2], 0.0, &mut rng), 0);
            assert_eq!(select_action([0.7, 0.2], 1.0, &mut rng), 1);
        }
        assert_eq!(greedy([0.3, 0.3]), KEEP);
    }

    #[test]
    fn epsilon_greedy_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let greedy_count = (0..n)
            .filter(|_| select_action([0.2, 0.9], 0.1, &mut rng) == 1)
            .count();
        let f = greedy_count as f64 / n as f64;
        assert!((f - 0.9).abs() <= 0.01, "{f}");
    }

    fn state(n: u8, s: &[f64]) -> MdpState {
        MdpState {
            n,
            smoothed: s.to_vec(),
        }
    }

    /// Single hidden unit copying the first input; output 1 reads it, output 0
    /// is a constant bias.
    fn hand_net(keep_bias: f64) -> QNetParams {
        let mut v = QNetParams::zeros(2, 10);
        let (_, w2, b2) = v.offsets();
        v.params[0] = 1.0; // w1[0][0]
        v.params[w2 + 10] = 1.0; // w2[1][0]
        v.params[b2] = keep_bias;
        v
    }

    #[test]
    fn transition_keeps_on_ties_and_clamps() {
        let prev = state(4, &[0.2, 0.0]);
        // Q = (0.7, 0.2): keep
        assert_eq!(transition(&prev, vec![1.0, 1.0], &hand_net(0.7), 1.0, 8).unwrap().n, 4);
        // Q = (0.2, 0.2): tie keeps
        assert_eq!(transition(&prev, vec![1.0, 1.0], &hand_net(0.2), 1.0, 8).unwrap().n, 4);
        // Q = (0.0, 0.2): increase
        assert_eq!(transition(&prev, vec![1.0, 1.0], &hand_net(0.0), 1.0, 8).unwrap().n, 5);
        let top = state(8, &[0.2, 0.0]);
        assert_eq!(transition(&top, vec![1.0, 1.0], &hand_net(0.0), 1.0, 8).unwrap().n, 8);
    }

    /// Scalar linear Q(s, a) = v * phi(s).
    struct LinearQ {
        v: [f64; 1],
    }

    impl ActionValue for LinearQ {
        fn q(&self, input: &[f64], _a: u8) -> Result<f64> {
            Ok(self.v[0] * input[0])
        }
        fn grad(&self, input: &[f64], _a: u8) -> Result<Vec<f64>> {
            Ok(vec![input[0]])
        }
        fn params(&self) -> &[f64] {
            &self.v
        }
        fn params_mut(&mut self) -> &mut [f64] {
            &mut self.v
        }
    }

    #[test]
    fn sarsa_scalar_hand_arithmetic() {
        let mut q = LinearQ { v: [1.0] };
        let delta = sarsa_update(&mut q, &[2.0], 0, 1.0, &[5.0], 0, 0.1, 0.0).unwrap();
        assert_eq!(delta, -1.0);
        assert_eq!(q.v[0], 0.8);
    }

    #[test]
    fn sarsa_zero_td_error_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut v = QNetParams::uniform(3, 10, 0.3, &mut rng);
        let before = v.clone();
        let s = [0.5, 1.0, 0.2];
        let s2 = [0.1, 0.4, 0.9];
        let q_prev = v.q(&s, 1).unwrap();
        let q_next = v.q(&s2, 0).unwrap();
        let r = q_prev - 0.5 * q_next;
        let delta = sarsa_update(&mut v, &s, 1, r, &s2, 0, 0.1, 0.5).unwrap();
        assert!(delta.abs() < 1e-15);
        assert!(v.params.iter().zip(&before.params).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn non_finite_td_error_rejected() {
        let mut q = LinearQ { v: [1.0] };
        assert!(sarsa_update(&mut q, &[1.0], 0, f64::NAN, &[1.0], 0, 0.1, 0.9).is_err());
    }

    #[test]
    fn q_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = QNetParams::uniform(5, 10, 0.5, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();
        for a in 0..2u8 {
            let g = v.grad(&x, a).unwrap();
            for i in 0..v.params.len() {
                let h = 1e-6;
                let mut p = v.clone();
                p.params[i] += h;
                let up = p.q(&x, a).unwrap();
                p.params[i] -= 2.0 * h;
                let down = p.q(&x, a).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-3 * fd.abs().max(g[i].abs()).max(1e-3));
            }
        }
    }

    #[test]
    fn bootstrap_then_zero_network_stays_at_min() {
        let hyper = MdpHyper {
            epsilon: 0.0,
            eta: 0.0,
            ..MdpHyper::default()
        };
        let rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = MdpController::with_params(hyper, 5, QNetParams::zeros(5, 10), rng);
        let first = c.step(&[2.3], 0.0).unwrap();
        assert_eq!((first.t, first.bits, first.action, first.reward), (0, 2, 0, None));
        for t in 1..50 {
            let out = c.step(&[2.0, 1.9, 1.8, 1.7, 1.6], 12.0).unwrap();
            assert_eq!((out.t, out.bits, out.action), (t, 2, 0));
        }
    }

    #[test]
    fn falling_losses_earn_positive_reward() {
        let mut c = MdpController::new(MdpHyper::default(), 5, 2).unwrap();
        c.step(&[3.0], 0.0).unwrap();
        let mut level = 3.0;
        for _ in 0..20 {
            let raw: Vec<f64> = (0..5)
                .map(|_| {
                    level *= 0.8;
                    level
                })
                .collect();
            let out = c.step(&raw, 1.0).unwrap();
            assert!(out.reward.unwrap() > 0.0);
        }
    }

    /// Pencil-and-paper transcript with window 2, alpha 1, epsilon 0,
    /// eta 0.1, discount 0.9, gamma_scale 300, cost 10 ms.
    ///
    /// t=0: raw [2.0] -> scale 2, x0 = [1, 1], Q(s0) = (0.5, 1.0), a0 = 1, K = 3.
    /// t=1: smoothed [1.0, 0.5], argmax Q(s0) = 1 -> n1 = 3, beta = -0.5,
    ///      r0 = 0.5*300/10 = 15, x1 = [0.5, 0.25], Q(s1) = (0.5, 0.5) -> a1 = 0,
    ///      delta = 15 + 0.9*0.5 - 1.0 = 14.45; dQ(s0,1)/dv is 1 on w1[0][0],
    ///      w1[0][1], b1[0], w2[1][0], b2[1], each gaining 1.445. K = 3.
    /// t=2: smoothed [0.5, 0.5], Q(s1, 1) = 2.445*3.02875 + 1.445 > 0.5 -> n2 = 4;
    ///      x2 = [0.25, 0.25], Q(s2, 1) = 2.445*2.4175 + 1.445 > 0.5 -> a2 = 1, K = 5.
    #[test]
    fn two_step_hand_transcript() {
        let hyper = MdpHyper {
            alpha: 1.0,
            epsilon: 0.0,
            eta: 0.1,
            gamma_discount: 0.9,
            gamma_scale: 300.0,
            ..MdpHyper::default()
        };
        let v = hand_net(0.5);
        let mut c = MdpController::with_params(hyper, 2, v, ChaCha8Rng::seed_from_u64(5));
        let s0 = c.step(&[2.0], 0.0).unwrap();
        assert_eq!((s0.bits, s0.action), (3, 1));
        let s1 = c.step(&[1.0, 0.5], 10.0).unwrap();
        assert_eq!((s1.bits, s1.action), (3, 0));
        assert!((s1.reward.unwrap() - 15.0).abs() < 1e-12);
        assert!((s1.td_error.unwrap() - 14.45).abs() < 1e-12);
        let p = &c.params().params;
        let (b1, w2, b2) = c.params().offsets();
        for idx in [0, 1, b1, w2 + 10, b2 + 1] {
            let base = if idx == 0 || idx == w2 + 10 { 1.0 } else { 0.0 };
            assert!((p[idx] - (base + 1.445)).abs() < 1e-12, "param {idx} = {}", p[idx]);
        }
        let s2 = c.step(&[0.5, 0.5], 10.0).unwrap();
        assert_eq!(c.state().unwrap().n, 4);
        assert_eq!((s2.bits, s2.action), (5, 1));
    }

    #[test]
    fn checkpoint_round_trips_through_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = QNetParams::uniform(5, 10, 0.05, &mut rng);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<QNetParams>(&json).unwrap(), v);
    }

    proptest! {
        #[test]
        fn bits_never_decrease(seed in any::<u64>(), losses in proptest::collection::vec(0.01f64..5.0, 5 * 40)) {
            let mut c = MdpController::new(MdpHyper::default(), 5, seed).unwrap();
            let mut last = c.step(&losses[..1], 0.0).unwrap().bits;
            prop_assert!((2..=3).contains(&last));
            for chunk in losses.chunks(5) {
                let out = c.step(chunk, 7.5).unwrap();
                prop_assert!(out.bits >= last && out.bits <= 8);
                last = out.bits;
            }
        }

        #[test]
        fn smoothing_stays_in_hull(prev in -5.0f64..5.0, raw in proptest::collection::vec(-5.0f64..5.0, 1..12), alpha in 0.001f64..=1.0) {
            let s = smooth_losses(&raw, alpha, prev);
            let mut lo = prev;
            let mut hi = prev;
            for (i, &v) in s.iter().enumerate() {
                lo = lo.min(raw[i]);
                hi = hi.max(raw[i]);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn reward_sign_and_cost_monotonicity(beta in -10.0f64..10.0, c1 in 0.1f64..1e4, dc in 0.1f64..1e4) {
            let r = reward(beta, c1, 300.0).unwrap();
            prop_assert_eq!(r > 0.0, beta < 0.0);
            if beta < 0.0 {
                prop_assert!(reward(beta, c1 + dc, 300.0).unwrap() < r);
            }
        }

        #[test]
        fn greedy_choice_shift_invariant(q0 in -5.0f64..5.0, q1 in -5.0f64..5.0, shift in -100.0f64..100.0, seed in any::<u64>()) {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                prop_assert_eq!(
                    select_action([q0, q1], 0.3, &mut a),
                    select_action([q0 + shift, q1 + shift], 0.3, &mut b)
                );
            }
        }
    }
}
