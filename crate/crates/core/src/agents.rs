//! Value-based learners: DQN, quantile regression (QR), expectile regression
//! (ER), and a learner whose head emits the four parameters of a generalized
//! lambda distribution (GLD) per action. All four share the same replay
//! buffer, epsilon-greedy exploration, and target-network scaffolding; they
//! differ in what the head predicts and which loss trains it.

use crate::env::Observation;
use crate::gld::{
    expectile_grad, expectile_loss, huber_grad, huber_loss, quantile_huber_grad,
    quantile_huber_loss, smoothed_pinball_grad, smoothed_pinball_loss, GldParams, QuantileLevels,
};
use crate::net::{encode_features, AdamConfig, AdamState, Checkpoint, NetError, Network, NetworkSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("bad agent config: {0}")]
    BadConfig(String),
    #[error("network head emits {got} outputs per action but {expected} are needed")]
    HeadMismatch { expected: usize, got: usize },
    #[error("cannot sample from an empty replay buffer")]
    EmptyReplay,
    #[error("replay capacity must be at least 1")]
    ZeroCapacity,
    #[error("checkpoint format version {0} is not supported")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Dqn,
    QrDqn,
    ErDqn,
    Gtdqn,
}

impl AgentKind {
    /// How many values the head must emit per action.
    pub fn outputs_per_action(&self, num_quantiles: usize) -> usize {
        match self {
            AgentKind::Dqn => 1,
            AgentKind::QrDqn | AgentKind::ErDqn => num_quantiles,
            AgentKind::Gtdqn => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AgentKind::Dqn => "dqn",
            AgentKind::QrDqn => "qr-dqn",
            AgentKind::ErDqn => "er-dqn",
            AgentKind::Gtdqn => "gtdqn",
        }
    }
}

impl std::str::FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dqn" => Ok(AgentKind::Dqn),
            "qr-dqn" | "qrdqn" => Ok(AgentKind::QrDqn),
            "er-dqn" | "erdqn" => Ok(AgentKind::ErDqn),
            "gtdqn" => Ok(AgentKind::Gtdqn),
            other => Err(format!("unknown agent {other:?}, expected dqn, qr-dqn, er-dqn, or gtdqn")),
        }
    }
}

/// How a distribution-parameter head ranks actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionSelection {
    /// Analytic mean of the predicted distribution.
    GldMean,
    /// Average of the distribution's quantiles at the configured levels; the
    /// ablation that mimics how quantile heads estimate their mean.
    QuantileAverage,
}

/// Which pairwise loss trains quantile-valued heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Huber envelope multiplied onto the raw pinball loss.
    SmoothedPinball,
    /// Classical quantile-weighted Huber loss.
    QuantileHuber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub kind: AgentKind,
    /// Number of quantile (or expectile) levels N; levels are the midpoints
    /// (2i - 1) / 2N. Ignored by plain DQN. Must be odd for the expectile
    /// learner so that level 0.5 exists.
    pub num_quantiles: usize,
    pub gamma: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Target network refresh period, in optimizer updates.
    pub target_sync_every: u64,
    pub replay_capacity: usize,
    /// Exploration decays linearly from start to final over this many
    /// environment steps, then stays at final.
    pub epsilon_start: f64,
    pub epsilon_final: f64,
    pub epsilon_decay_steps: u64,
    /// Smoothing width of the Huber-type losses.
    pub huber_delta: f64,
    pub loss: LossKind,
    pub action_selection: ActionSelection,
    /// Rewards are multiplied by this inside TD targets, keeping network
    /// outputs near unit scale. Evaluation metrics always use raw rewards.
    pub reward_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            kind: AgentKind::Gtdqn,
            num_quantiles: 9,
            gamma: 0.99,
            adam: AdamConfig::default(),
            batch_size: 64,
            target_sync_every: 500,
            replay_capacity: 100_000,
            epsilon_start: 1.0,
            epsilon_final: 0.01,
            epsilon_decay_steps: 20_000,
            huber_delta: 1.0,
            loss: LossKind::SmoothedPinball,
            action_selection: ActionSelection::GldMean,
            reward_scale: 1.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |msg: String| Err(AgentError::BadConfig(msg));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.num_quantiles == 0 && self.kind != AgentKind::Dqn {
            return bad("at least one quantile level is required".into());
        }
        if self.kind == AgentKind::ErDqn && self.num_quantiles % 2 == 0 {
            return bad(format!(
                "expectile learner needs an odd level count so level 0.5 exists, got {}",
                self.num_quantiles
            ));
        }
        for (name, eps) in [("epsilon_start", self.epsilon_start), ("epsilon_final", self.epsilon_final)] {
            if !(0.0..=1.0).contains(&eps) {
                return bad(format!("{name} must lie in [0, 1], got {eps}"));
            }
        }
        if self.epsilon_final > self.epsilon_start {
            return bad("exploration must not grow over time".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.replay_capacity < self.batch_size {
            return bad(format!(
                "replay capacity {} is smaller than the batch size {}",
                self.replay_capacity, self.batch_size
            ));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return bad(format!("huber delta must be positive, got {}", self.huber_delta));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad(format!("reward scale must be positive, got {}", self.reward_scale));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        Ok(())
    }

    /// Linear exploration schedule over environment steps.
    pub fn epsilon_at(&self, env_step: u64) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_final;
        }
        let frac = (env_step as f64 / self.epsilon_decay_steps as f64).min(1.0);
        self.epsilon_start + (self.epsilon_final - self.epsilon_start) * frac
    }
}

/// One step of experience, with observations already encoded into network
/// features so replay does not re-encode on every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub features: Vec<f64>,
    pub action: u32,
    pub reward: f64,
    pub next_features: Vec<f64>,
    pub done: bool,
}

/// Ring buffer of transitions with uniform with-replacement sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    buf: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, AgentError> {
        if capacity == 0 {
            return Err(AgentError::ZeroCapacity);
        }
        Ok(Self { buf: VecDeque::with_capacity(capacity.min(1 << 20)), capacity })
    }

    pub fn push(&mut self, t: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.buf[idx]
    }

    /// Draws `n` transitions uniformly, with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(
        &'a self,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<&'a Transition>, AgentError> {
        if self.buf.is_empty() {
            return Err(AgentError::EmptyReplay);
        }
        Ok((0..n).map(|_| &self.buf[rng.gen_range(0..self.buf.len())]).collect())
    }
}

/// Argmax with ties resolved to the lowest index; with probability `epsilon`
/// a uniformly random action instead. A zero epsilon consumes no randomness.
pub fn epsilon_greedy<R: Rng + ?Sized>(values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    assert!(!values.is_empty(), "no actions to choose from");
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..values.len());
    }
    argmax(values)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Floor added to the positive parameters so the map stays away from zero.
pub const HEAD_MAP_FLOOR: f64 = 1e-3;

/// Maps four raw head outputs to valid distribution parameters: the location
/// passes through, the scale and both shape parameters go through
/// `softplus(x) + 1e-3`, which is smooth, monotone, and strictly positive.
pub fn gtdqn_head_map(raw: &[f64; 4]) -> GldParams {
    GldParams::new(
        raw[0],
        softplus(raw[1]) + HEAD_MAP_FLOOR,
        softplus(raw[2]) + HEAD_MAP_FLOOR,
        softplus(raw[3]) + HEAD_MAP_FLOOR,
    )
    .expect("softplus plus a positive floor always yields valid parameters")
}

/// Derivative of each mapped parameter with respect to its raw input.
pub fn gtdqn_head_map_grad(raw: &[f64; 4]) -> [f64; 4] {
    [1.0, sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])]
}

/// TD target for a scalar value head.
pub fn dqn_target(scaled_reward: f64, done: bool, gamma: f64, max_next: f64) -> f64 {
    if done {
        scaled_reward
    } else {
        scaled_reward + gamma * max_next
    }
}

/// TD targets for a vector of next-state statistics (quantiles, expectiles,
/// or sampled distribution values). Terminal transitions collapse every
/// entry to the reward.
pub fn distributional_targets(
    scaled_reward: f64,
    done: bool,
    gamma: f64,
    next_values: &[f64],
) -> Vec<f64> {
    if done {
        vec![scaled_reward; next_values.len()]
    } else {
        next_values.iter().map(|&v| scaled_reward + gamma * v).collect()
    }
}

/// True when any later entry is strictly below an earlier neighbor, i.e. the
/// vector read as quantiles crosses itself.
pub fn has_crossing(values: &[f64]) -> bool {
    values.windows(2).any(|w| w[1] < w[0])
}

/// What one optimizer update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub loss: f64,
    /// Global gradient norm before clipping; NaN when the update was skipped.
    pub grad_norm: f64,
    pub applied: bool,
    /// Mean over the batch of the greedy action's value estimate.
    pub mean_value: f64,
    /// Quantile vectors in this batch that crossed (always 0 for the
    /// distribution-parameter head, by construction).
    pub crossings: u64,
}

#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    levels: QuantileLevels,
    online: Network,
    target: Network,
    adam: AdamState,
    updates: u64,
    crossing_events: u64,
    crossing_checked: u64,
}

impl Agent {
    pub fn new(cfg: AgentConfig, spec: NetworkSpec, seed: u64) -> Result<Self, AgentError> {
        cfg.validate()?;
        let expected = cfg.kind.outputs_per_action(cfg.num_quantiles);
        if spec.outputs_per_action != expected {
            return Err(AgentError::HeadMismatch { expected, got: spec.outputs_per_action });
        }
        let online = Network::new(spec, seed)?;
        let target = online.clone();
        let adam = AdamState::new(online.param_count());
        let levels = QuantileLevels::midpoints(cfg.num_quantiles.max(1));
        Ok(Self { cfg, levels, online, target, adam, updates: 0, crossing_events: 0, crossing_checked: 0 })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn levels(&self) -> &QuantileLevels {
        &self.levels
    }

    pub fn network(&self) -> &Network {
        &self.online
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn optimizer_skips(&self) -> u64 {
        self.adam.skipped()
    }

    /// Crossing statistics: (vectors that crossed, vectors checked).
    pub fn crossing_stats(&self) -> (u64, u64) {
        (self.crossing_events, self.crossing_checked)
    }

    /// Changes the optimizer step size mid-run, e.g. to settle precisely
    /// onto a fixed point after a fast approach phase.
    pub fn set_learning_rate(&mut self, lr: f64) {
        assert!(lr > 0.0 && lr.is_finite(), "learning rate must be positive");
        self.cfg.adam.lr = lr;
    }

    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        encode_features(obs, self.online.spec().stock_scale)
    }

    /// Per-action scalar values used for greedy selection, from the online
    /// network.
    pub fn action_values(&self, features: &[f64]) -> Vec<f64> {
        let out = self.online.forward(features);
        self.values_from_output(&out)
    }

    /// Collapses a network output into one ranking value per action.
    pub fn values_from_output(&self, out: &[f64]) -> Vec<f64> {
        let per = self.online.spec().outputs_per_action;
        let actions = self.online.spec().actions;
        debug_assert_eq!(out.len(), per * actions);
        match self.cfg.kind {
            AgentKind::Dqn => out.to_vec(),
            AgentKind::QrDqn => {
                (0..actions).map(|a| mean(&out[a * per..(a + 1) * per])).collect()
            }
            AgentKind::ErDqn => {
                let mid = self.levels.median_index().expect("odd level count enforced");
                (0..actions).map(|a| out[a * per + mid]).collect()
            }
            AgentKind::Gtdqn => (0..actions)
                .map(|a| {
                    let raw: [f64; 4] = out[a * 4..(a + 1) * 4].try_into().unwrap();
                    let params = gtdqn_head_map(&raw);
                    match self.cfg.action_selection {
                        ActionSelection::GldMean => params.mean(),
                        ActionSelection::QuantileAverage => {
                            mean(&self.levels.levels().iter().map(|&u| params.quantile(u)).collect::<Vec<_>>())
                        }
                    }
                })
                .collect(),
        }
    }

    pub fn greedy_action(&self, features: &[f64]) -> u32 {
        argmax(&self.action_values(features)) as u32
    }

    pub fn act<R: Rng + ?Sized>(&self, features: &[f64], epsilon: f64, rng: &mut R) -> u32 {
        epsilon_greedy(&self.action_values(features), epsilon, rng) as u32
    }

    /// Copies the online parameters into the target network.
    pub fn sync_target(&mut self) {
        self.target.sync_from(&self.online);
    }

    /// One optimizer update on a sampled batch, followed by a target sync
    /// every `target_sync_every` updates.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<UpdateReport, AgentError> {
        if batch.is_empty() {
            return Err(AgentError::EmptyReplay);
        }
        let mut grads = self.online.zero_grads();
        let mut loss_sum = 0.0;
        let mut value_sum = 0.0;
        let mut crossings = 0u64;
        let inv_b = 1.0 / batch.len() as f64;
        let per = self.online.spec().outputs_per_action;

        for t in batch {
            let scaled_r = t.reward * self.cfg.reward_scale;
            let t_out = self.target.forward(&t.next_features);
            let (out, cache) = self.online.forward_cached(&t.features);
            let mut d_out = vec![0.0; out.len()];
            let a = t.action as usize;
            let slot = a * per;

            let sample_loss = match self.cfg.kind {
                AgentKind::Dqn => {
                    let next_vals = self.values_from_output(&t_out);
                    let max_next = next_vals[argmax(&next_vals)];
                    let y = dqn_target(scaled_r, t.done, self.cfg.gamma, max_next);
                    let y_hat = out[slot];
                    d_out[slot] = -huber_grad(y - y_hat, self.cfg.huber_delta) * inv_b;
                    huber_loss(y - y_hat, self.cfg.huber_delta)
                }
                AgentKind::QrDqn => {
                    let next_best = self.best_target_action(&t_out);
                    let next_q = &t_out[next_best * per..(next_best + 1) * per];
                    let targets = distributional_targets(scaled_r, t.done, self.cfg.gamma, next_q);
                    let preds = &out[slot..slot + per];
                    self.track_crossing(preds, &mut crossings);
                    let mut l = 0.0;
                    for (j, &u) in self.levels.levels().iter().enumerate() {
                        let mut g = 0.0;
                        for &y in &targets {
                            l += self.pair_loss(u, y, preds[j]);
                            g += self.pair_grad(u, y, preds[j]);
                        }
                        d_out[slot + j] = g / targets.len() as f64 * inv_b;
                    }
                    l / targets.len() as f64
                }
                AgentKind::ErDqn => {
                    let next_best = self.best_target_action(&t_out);
                    let next_e = &t_out[next_best * per..(next_best + 1) * per];
                    let targets = distributional_targets(scaled_r, t.done, self.cfg.gamma, next_e);
                    let preds = &out[slot..slot + per];
                    self.track_crossing(preds, &mut crossings);
                    let mut l = 0.0;
                    for (j, &u) in self.levels.levels().iter().enumerate() {
                        let mut g = 0.0;
                        for &y in &targets {
                            l += expectile_loss(u, y, preds[j]);
                            g += expectile_grad(u, y, preds[j]);
                        }
                        d_out[slot + j] = g / targets.len() as f64 * inv_b;
                    }
                    l / targets.len() as f64
                }
                AgentKind::Gtdqn => {
                    let next_best = self.best_target_action(&t_out);
                    let raw_next: [f64; 4] =
                        t_out[next_best * 4..(next_best + 1) * 4].try_into().unwrap();
                    let next_params = gtdqn_head_map(&raw_next);
                    let next_q: Vec<f64> =
                        self.levels.levels().iter().map(|&u| next_params.quantile(u)).collect();
                    let targets = distributional_targets(scaled_r, t.done, self.cfg.gamma, &next_q);

                    let raw: [f64; 4] = out[slot..slot + 4].try_into().unwrap();
                    let params = gtdqn_head_map(&raw);
                    let map_grad = gtdqn_head_map_grad(&raw);
                    let preds: Vec<f64> =
                        self.levels.levels().iter().map(|&u| params.quantile(u)).collect();
                    self.track_crossing(&preds, &mut crossings);
                    let mut l = 0.0;
                    for (j, &u) in self.levels.levels().iter().enumerate() {
                        let mut g = 0.0;
                        for &y in &targets {
                            l += self.pair_loss(u, y, preds[j]);
                            g += self.pair_grad(u, y, preds[j]);
                        }
                        g /= targets.len() as f64;
                        // Chain rule through the quantile function and the
                        // positivity map, one raw output at a time.
                        let q_grad = params.quantile_grad(u);
                        for k in 0..4 {
                            d_out[slot + k] += g * q_grad[k] * map_grad[k] * inv_b;
                        }
                    }
                    l / targets.len() as f64
                }
            };
            loss_sum += sample_loss;
            let vals = self.values_from_output(&out);
            value_sum += vals[argmax(&vals)];
            self.online.backward_into(&cache, &d_out, &mut grads);
        }

        let report = self.adam.step(&self.cfg.adam, self.online.params_mut(), &mut grads);
        if report.applied {
            self.updates += 1;
            if self.cfg.target_sync_every > 0 && self.updates % self.cfg.target_sync_every == 0 {
                self.sync_target();
            }
        }
        Ok(UpdateReport {
            loss: loss_sum * inv_b,
            grad_norm: report.grad_norm,
            applied: report.applied,
            mean_value: value_sum * inv_b,
            crossings,
        })
    }

    /// Greedy action under the TARGET network's ranking. The collapse rule
    /// is the same as for the online network, applied to the target output.
    fn best_target_action(&self, t_out: &[f64]) -> usize {
        argmax(&self.values_from_output(t_out))
    }

    fn pair_loss(&self, u: f64, y: f64, y_hat: f64) -> f64 {
        match self.cfg.loss {
            LossKind::SmoothedPinball => smoothed_pinball_loss(u, y, y_hat, self.cfg.huber_delta),
            LossKind::QuantileHuber => quantile_huber_loss(u, y, y_hat, self.cfg.huber_delta),
        }
    }

    fn pair_grad(&self, u: f64, y: f64, y_hat: f64) -> f64 {
        match self.cfg.loss {
            LossKind::SmoothedPinball => smoothed_pinball_grad(u, y, y_hat, self.cfg.huber_delta),
            LossKind::QuantileHuber => quantile_huber_grad(u, y, y_hat, self.cfg.huber_delta),
        }
    }

    fn track_crossing(&mut self, values: &[f64], crossings: &mut u64) {
        self.crossing_checked += 1;
        if has_crossing(values) {
            self.crossing_events += 1;
            *crossings += 1;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let ck = AgentCheckpoint {
            format_version: AGENT_CHECKPOINT_VERSION,
            cfg: self.cfg.clone(),
            net: Checkpoint::from_network(&self.online),
            updates: self.updates,
        };
        let file = std::io::BufWriter::new(std::fs::File::create(path).map_err(NetError::Io)?);
        serde_json::to_writer(file, &ck).map_err(NetError::Json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let file = std::io::BufReader::new(std::fs::File::open(path).map_err(NetError::Io)?);
        let ck: AgentCheckpoint = serde_json::from_reader(file).map_err(NetError::Json)?;
        if ck.format_version != AGENT_CHECKPOINT_VERSION {
            return Err(AgentError::UnsupportedVersion(ck.format_version));
        }
        ck.cfg.validate()?;
        let online = ck.net.into_network()?;
        let expected = ck.cfg.kind.outputs_per_action(ck.cfg.num_quantiles);
        if online.spec().outputs_per_action != expected {
            return Err(AgentError::HeadMismatch { expected, got: online.spec().outputs_per_action });
        }
        let target = online.clone();
        let adam = AdamState::new(online.param_count());
        let levels = QuantileLevels::midpoints(ck.cfg.num_quantiles.max(1));
        Ok(Self {
            cfg: ck.cfg,
            levels,
            online,
            target,
            adam,
            updates: ck.updates,
            crossing_events: 0,
            crossing_checked: 0,
        })
    }
}

pub const AGENT_CHECKPOINT_VERSION: u32 = 1;

/// On-disk agent snapshot: config plus online network. The target network
/// and optimizer moments are rebuilt on load, which is exact for evaluation
/// and a fresh-start approximation for resumed training.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AgentCheckpoint {
    format_version: u32,
    cfg: AgentConfig,
    net: Checkpoint,
    updates: u64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(kind: AgentKind, n: usize, actions: usize) -> NetworkSpec {
        NetworkSpec {
            stock_len: 8,
            horizon: 2,
            conv_kernel: 3,
            conv_channels: 2,
            trunk: vec![16, 12],
            actions,
            outputs_per_action: kind.outputs_per_action(n),
            stock_scale: 10.0,
        }
    }

    fn tiny_cfg(kind: AgentKind) -> AgentConfig {
        AgentConfig {
            kind,
            num_quantiles: 5,
            gamma: 0.0,
            batch_size: 8,
            target_sync_every: 10,
            replay_capacity: 64,
            adam: AdamConfig { lr: 5e-3, ..Default::default() },
            ..Default::default()
        }
    }

    fn fixed_features(spec: &NetworkSpec, fill: f64) -> Vec<f64> {
        vec![fill; spec.feature_len()]
    }

    #[test]
    fn epsilon_greedy_argmax_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(epsilon_greedy(&[1.0, 3.0, 2.0], 0.0, &mut rng), 1);
        assert_eq!(epsilon_greedy(&[2.0, 2.0], 0.0, &mut rng), 0, "ties break low");
        assert_eq!(epsilon_greedy(&[-5.0], 0.0, &mut rng), 0);
    }

    #[test]
    fn epsilon_one_is_uniform() {
        // Chi-square goodness of fit against the uniform distribution over
        // five actions at the 99 percent level (4 dof -> 13.28).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let values = [0.0, 9.0, 3.0, 1.0, 2.0];
        let n = 10_000usize;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[epsilon_greedy(&values, 1.0, &mut rng)] += 1;
        }
        let expected = n as f64 / 5.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.28, "chi-square {chi2} too large for uniformity");
    }

    #[test]
    fn zero_epsilon_consumes_no_randomness() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        epsilon_greedy(&[1.0, 2.0], 0.0, &mut a);
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn replay_evicts_oldest_and_errors_when_empty() {
        let mk = |r: f64| Transition {
            features: vec![0.0],
            action: 0,
            reward: r,
            next_features: vec![0.0],
            done: false,
        };
        let mut buf = ReplayBuffer::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(buf.sample(1, &mut rng), Err(AgentError::EmptyReplay)));
        buf.push(mk(1.0));
        buf.push(mk(2.0));
        buf.push(mk(3.0));
        assert_eq!(buf.len(), 2);
        let rewards: Vec<f64> = (0..buf.len()).map(|i| buf.get(i).reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0], "oldest entry evicted first");
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        for i in 0..10 {
            buf.push(Transition {
                features: vec![0.0],
                action: i,
                reward: 0.0,
                next_features: vec![0.0],
                done: false,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000usize;
        let mut counts = [0usize; 10];
        for t in buf.sample(n, &mut rng).unwrap() {
            counts[t.action as usize] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 21.67, "chi-square {chi2} exceeds the 99 percent cut for 9 dof");
    }

    #[test]
    fn head_map_reference_point_and_positivity() {
        let p = gtdqn_head_map(&[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.lambda1(), 0.0);
        let expect = 0.6941471805599453;
        assert!((p.lambda2() - expect).abs() < 1e-15);
        assert!((p.lambda3() - expect).abs() < 1e-15);
        assert!((p.lambda4() - expect).abs() < 1e-15);
        // Any raw input yields valid parameters, including extremes.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let raw = [
                rng.gen_range(-60.0..60.0),
                rng.gen_range(-60.0..60.0),
                rng.gen_range(-60.0..60.0),
                rng.gen_range(-60.0..60.0),
            ];
            let p = gtdqn_head_map(&raw);
            assert!(p.lambda2() >= HEAD_MAP_FLOOR);
            assert!(p.lambda3() >= HEAD_MAP_FLOOR);
            assert!(p.lambda4() >= HEAD_MAP_FLOOR);
        }
        let extreme = gtdqn_head_map(&[0.0, -700.0, 700.0, 0.0]);
        assert!(extreme.lambda2() >= HEAD_MAP_FLOOR && extreme.lambda2().is_finite());
        assert!(extreme.lambda3().is_finite());
    }

    #[test]
    fn head_map_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let raw = [
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
            ];
            let g = gtdqn_head_map_grad(&raw);
            let h = 1e-6;
            for k in 1..4 {
                let mut up = raw;
                up[k] += h;
                let mut down = raw;
                down[k] -= h;
                let fd = (softplus(up[k]) - softplus(down[k])) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-8, "coordinate {k}");
            }
            assert_eq!(g[0], 1.0);
        }
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let cfg = AgentConfig {
            epsilon_start: 1.0,
            epsilon_final: 0.01,
            epsilon_decay_steps: 1000,
            ..Default::default()
        };
        assert_eq!(cfg.epsilon_at(0), 1.0);
        assert!((cfg.epsilon_at(500) - 0.505).abs() < 1e-12);
        assert!((cfg.epsilon_at(1000) - 0.01).abs() < 1e-12);
        assert!((cfg.epsilon_at(100_000) - 0.01).abs() < 1e-12);
        let flat = AgentConfig { epsilon_decay_steps: 0, ..cfg };
        assert_eq!(flat.epsilon_at(0), 0.01);
    }

    #[test]
    fn targets_mask_bootstrap_on_done() {
        assert_eq!(dqn_target(5.0, true, 0.99, 123.0), 5.0);
        assert_eq!(dqn_target(5.0, false, 0.0, 123.0), 5.0);
        assert!((dqn_target(1.0, false, 0.9, 10.0) - 10.0).abs() < 1e-12);
        let t = distributional_targets(2.0, true, 0.99, &[1.0, 5.0, 9.0]);
        assert_eq!(t, vec![2.0, 2.0, 2.0]);
        let t = distributional_targets(2.0, false, 0.5, &[2.0, 4.0]);
        assert_eq!(t, vec![3.0, 4.0]);
    }

    #[test]
    fn crossing_detector() {
        assert!(!has_crossing(&[1.0, 2.0, 3.0]));
        assert!(!has_crossing(&[1.0, 1.0, 1.0]), "equal neighbors do not cross");
        assert!(has_crossing(&[1.0, 3.0, 2.0]));
        assert!(!has_crossing(&[5.0]));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = tiny_cfg(AgentKind::Dqn);
        assert!(ok.validate().is_ok());
        assert!(AgentConfig { gamma: 1.0, ..ok.clone() }.validate().is_err());
        assert!(AgentConfig { epsilon_start: 0.0, epsilon_final: 0.5, ..ok.clone() }
            .validate()
            .is_err());
        assert!(AgentConfig { kind: AgentKind::ErDqn, num_quantiles: 4, ..ok.clone() }
            .validate()
            .is_err());
        assert!(AgentConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(AgentConfig { replay_capacity: 4, batch_size: 8, ..ok.clone() }
            .validate()
            .is_err());
        assert!(AgentConfig { reward_scale: 0.0, ..ok.clone() }.validate().is_err());
        assert!(AgentConfig { huber_delta: -1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn head_mismatch_is_rejected() {
        let cfg = tiny_cfg(AgentKind::QrDqn);
        let spec = tiny_spec(AgentKind::Dqn, 5, 3);
        assert!(matches!(
            Agent::new(cfg, spec, 0),
            Err(AgentError::HeadMismatch { expected: 5, got: 1 })
        ));
    }

    #[test]
    fn full_exploration_makes_all_agents_identical() {
        // At epsilon = 1 the value estimates are never consulted, so every
        // agent kind must produce the same action stream from the same rng.
        let kinds = [AgentKind::Dqn, AgentKind::QrDqn, AgentKind::ErDqn, AgentKind::Gtdqn];
        let spec0 = tiny_spec(kinds[0], 5, 4);
        let features = fixed_features(&spec0, 0.2);
        let mut streams: Vec<Vec<u32>> = Vec::new();
        for kind in kinds {
            let agent = Agent::new(tiny_cfg(kind), tiny_spec(kind, 5, 4), 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            streams.push((0..200).map(|_| agent.act(&features, 1.0, &mut rng)).collect());
        }
        for s in &streams[1..] {
            assert_eq!(s, &streams[0]);
        }
    }

    #[test]
    fn gld_action_selection_matches_independent_recomputation() {
        let agent = Agent::new(tiny_cfg(AgentKind::Gtdqn), tiny_spec(AgentKind::Gtdqn, 5, 4), 10).unwrap();
        let spec = agent.network().spec().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let features: Vec<f64> =
                (0..spec.feature_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let greedy = agent.greedy_action(&features);
            // Recompute from the raw head outputs without the agent's help.
            let out = agent.network().forward(&features);
            let mut best = 0usize;
            let mut best_mean = f64::NEG_INFINITY;
            for a in 0..spec.actions {
                let raw: [f64; 4] = out[a * 4..(a + 1) * 4].try_into().unwrap();
                let m = gtdqn_head_map(&raw).mean();
                if m > best_mean {
                    best_mean = m;
                    best = a;
                }
            }
            assert_eq!(greedy, best as u32);
        }
    }

    fn bandit_batch(features: &[f64], reward: f64, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|_| Transition {
                features: features.to_vec(),
                action: 0,
                reward,
                next_features: features.to_vec(),
                done: true,
            })
            .collect()
    }

    #[test]
    fn dqn_learns_a_constant_reward() {
        let cfg = tiny_cfg(AgentKind::Dqn);
        let spec = tiny_spec(AgentKind::Dqn, 5, 1);
        let mut agent = Agent::new(cfg, spec.clone(), 12).unwrap();
        let features = fixed_features(&spec, 0.1);
        let batch = bandit_batch(&features, 1.0, 8);
        let refs: Vec<&Transition> = batch.iter().collect();
        for _ in 0..500 {
            let r = agent.update(&refs).unwrap();
            assert!(r.applied);
            assert!(r.loss.is_finite());
        }
        let q = agent.action_values(&features)[0];
        assert!((q - 1.0).abs() < 0.05, "Q converged to {q}, want 1");
        assert_eq!(agent.optimizer_skips(), 0);
    }

    #[test]
    fn gtdqn_learns_a_constant_reward_without_crossings() {
        let cfg = tiny_cfg(AgentKind::Gtdqn);
        let spec = tiny_spec(AgentKind::Gtdqn, 5, 1);
        let mut agent = Agent::new(cfg, spec.clone(), 13).unwrap();
        let features = fixed_features(&spec, 0.1);
        let batch = bandit_batch(&features, 1.0, 8);
        let refs: Vec<&Transition> = batch.iter().collect();
        for _ in 0..600 {
            let r = agent.update(&refs).unwrap();
            assert_eq!(r.crossings, 0, "monotone by construction");
        }
        let v = agent.action_values(&features)[0];
        assert!((v - 1.0).abs() < 0.1, "mean converged to {v}, want 1");
        let (events, checked) = agent.crossing_stats();
        assert_eq!(events, 0);
        assert_eq!(checked, 600 * 8);
    }

    #[test]
    fn qr_dqn_update_is_finite_and_counts_crossings_honestly() {
        let cfg = tiny_cfg(AgentKind::QrDqn);
        let spec = tiny_spec(AgentKind::QrDqn, 5, 3);
        let mut agent = Agent::new(cfg, spec.clone(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let batch: Vec<Transition> = (0..16)
            .map(|_| Transition {
                features: (0..spec.feature_len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                action: rng.gen_range(0..3),
                reward: rng.gen_range(-2.0..2.0),
                next_features: (0..spec.feature_len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                done: rng.gen_bool(0.2),
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        for _ in 0..30 {
            let r = agent.update(&refs).unwrap();
            assert!(r.loss.is_finite());
            assert!(r.loss >= 0.0);
        }
        let (_, checked) = agent.crossing_stats();
        assert_eq!(checked, 30 * 16, "every sampled vector is checked");
    }

    #[test]
    fn er_dqn_converges_to_the_mean_of_a_coin() {
        // gamma = 0 and rewards of +1/-1: the 0.5 expectile is the mean, 0.
        let cfg = tiny_cfg(AgentKind::ErDqn);
        let spec = tiny_spec(AgentKind::ErDqn, 5, 1);
        let mut agent = Agent::new(cfg, spec.clone(), 16).unwrap();
        let features = fixed_features(&spec, 0.1);
        let mut batch = bandit_batch(&features, 1.0, 4);
        batch.extend(bandit_batch(&features, -1.0, 4));
        let refs: Vec<&Transition> = batch.iter().collect();
        for _ in 0..600 {
            agent.update(&refs).unwrap();
        }
        let v = agent.action_values(&features)[0];
        assert!(v.abs() < 0.05, "median expectile is {v}, want about 0");
    }

    #[test]
    fn target_sync_happens_on_schedule() {
        let cfg = AgentConfig { target_sync_every: 3, ..tiny_cfg(AgentKind::Dqn) };
        let spec = tiny_spec(AgentKind::Dqn, 5, 2);
        let mut agent = Agent::new(cfg, spec.clone(), 17).unwrap();
        let features = fixed_features(&spec, 0.3);
        let batch = bandit_batch(&features, 1.0, 4);
        let refs: Vec<&Transition> = batch.iter().collect();
        agent.update(&refs).unwrap();
        agent.update(&refs).unwrap();
        assert_ne!(agent.online.params(), agent.target.params(), "not yet synced");
        agent.update(&refs).unwrap();
        assert_eq!(agent.online.params(), agent.target.params(), "synced on the third update");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        let cfg = tiny_cfg(AgentKind::Gtdqn);
        let spec = tiny_spec(AgentKind::Gtdqn, 5, 4);
        let mut agent = Agent::new(cfg, spec.clone(), 18).unwrap();
        let features = fixed_features(&spec, 0.25);
        let batch = bandit_batch(&features, 1.5, 8);
        let refs: Vec<&Transition> = batch.iter().collect();
        for _ in 0..20 {
            agent.update(&refs).unwrap();
        }
        agent.save(&path).unwrap();
        let restored = Agent::load(&path).unwrap();
        assert_eq!(restored.updates(), agent.updates());
        assert_eq!(restored.config(), agent.config());
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..30 {
            let f: Vec<f64> = (0..spec.feature_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(agent.greedy_action(&f), restored.greedy_action(&f));
            assert_eq!(agent.action_values(&f), restored.action_values(&f));
        }
    }
}
