//! Ordering policies and the classical (s, Q) baseline.

use crate::env::Observation;
use crate::items::PseudoItem;
use crate::market::{purchase_probability, Market};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Anything that can turn an observation into an order quantity.
///
/// `explore` distinguishes training-time behavior (epsilon-greedy agents
/// randomize) from evaluation (always greedy). Deterministic policies ignore
/// both `explore` and the RNG.
pub trait Policy {
    fn act(&self, obs: &Observation, explore: bool, rng: &mut ChaCha8Rng) -> u32;
}

/// Reorder-point / order-quantity parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqParams {
    /// Reorder point: order when the inventory position drops below this.
    pub s: u32,
    /// Fixed order quantity.
    pub q: u32,
}

/// The textbook (s, Q) policy: whenever on-hand plus in-transit inventory is
/// below `s`, order `q` units, otherwise order nothing. It looks only at the
/// inventory position, so it is blind to seasonality and shelf lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqPolicy {
    pub params: SqParams,
    /// Orders are clamped to this cap so the policy stays inside the same
    /// action space as the learned agents.
    pub max_order: u32,
}

impl SqPolicy {
    pub fn new(params: SqParams, max_order: u32) -> Self {
        Self { params, max_order }
    }

    pub fn decide(&self, on_hand: u32, pipeline_units: u32) -> u32 {
        let position = on_hand + pipeline_units;
        if position < self.params.s {
            self.params.q.min(self.max_order)
        } else {
            0
        }
    }
}

impl Policy for SqPolicy {
    fn act(&self, obs: &Observation, _explore: bool, _rng: &mut ChaCha8Rng) -> u32 {
        let on_hand = obs.stock_vector.iter().filter(|&&s| s > 0.0).count() as u32;
        self.decide(on_hand, obs.pipeline_units)
    }
}

/// Calibrates (s, Q) from the noise-free day-zero forecast: with mean daily
/// demand `d` over the coming week, cover the lead time plus one review day
/// (`s = round(d * (lead_days + 1))`) and reorder in day-sized batches
/// (`q = round(d)`, clamped to the order cap).
pub fn calibrate_sq(item: &PseudoItem, market: &Market, lead_time_steps: u32, max_order: u32) -> SqParams {
    let horizon = market.forecast.horizon_days.max(1) as u64;
    let total_mean = market.customers.total_mean();
    let mut daily = 0.0;
    for dt in 1..=horizon {
        daily += total_mean * purchase_probability(item, dt, &market.seasonality);
    }
    daily /= horizon as f64;
    let tau = market.seasonality.sub_periods_per_day as u32;
    let lead_days = lead_time_steps.div_ceil(tau);
    let s = (daily * (lead_days + 1) as f64).round() as u32;
    let q = (daily.round() as u32).min(max_order);
    SqParams { s, q }
}

/// Orders a fixed quantity every step; useful for audits and smoke tests.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub u32);

impl Policy for ConstantPolicy {
    fn act(&self, _obs: &Observation, _explore: bool, _rng: &mut ChaCha8Rng) -> u32 {
        self.0
    }
}

/// Uniformly random orders; the exploration stress-test policy.
#[derive(Debug, Clone, Copy)]
pub struct RandomPolicy {
    pub max_order: u32,
}

impl Policy for RandomPolicy {
    fn act(&self, _obs: &Observation, _explore: bool, rng: &mut ChaCha8Rng) -> u32 {
        rng.gen_range(0..=self.max_order)
    }
}
