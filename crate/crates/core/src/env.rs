//! Per-item store environment.
//!
//! Each item is simulated independently: a shelf of at most `max_stock`
//! units, each carrying its remaining shelf life in days, plus a pipeline of
//! outstanding orders that arrive after a fixed lead time. One step is one
//! sub-period of a day. Within a step the order of events is: deliveries
//! arrive, the new order is placed, demand realizes and is served LIFO
//! (freshest units first), and on the day's last sub-period every unit ages
//! by a day and expired units are discarded as waste.
//!
//! The step reward is
//!
//! ```text
//! margin * (sold - missed) - waste_weight * (wasted * cost) - order_cost * ordered
//! ```
//!
//! so missed sales are penalized at the forgone margin and waste at (possibly
//! weighted) procurement cost.

use crate::items::PseudoItem;
use crate::market::{forecast_probability, purchase_probability, realize_demand, Market};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action {action} exceeds the order cap {max_order}")]
    ActionTooLarge { action: u32, max_order: u32 },
    #[error("max stock must be at least 1")]
    ZeroMaxStock,
    #[error("lead time must be at least 1 step")]
    ZeroLeadTime,
    #[error("waste weight must be non-negative and finite, got {0}")]
    BadWasteWeight(f64),
    #[error("order cost must be non-negative and finite, got {0}")]
    BadOrderCost(f64),
}

/// Environment constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Shelf capacity M; deliveries are capped so stock never exceeds it.
    pub max_stock: usize,
    /// Largest order per step (the action space is 0..=max_order).
    pub max_order: u32,
    /// Steps between placing an order and its delivery.
    pub lead_time: u32,
    /// Multiplier on the waste cost term of the reward.
    pub waste_weight: f64,
    /// Cost charged per ordered unit at placement time.
    pub order_cost: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { max_stock: 100, max_order: 20, lead_time: 4, waste_weight: 1.0, order_cost: 0.0 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_stock == 0 {
            return Err(EnvError::ZeroMaxStock);
        }
        if self.lead_time == 0 {
            return Err(EnvError::ZeroLeadTime);
        }
        if !(self.waste_weight >= 0.0 && self.waste_weight.is_finite()) {
            return Err(EnvError::BadWasteWeight(self.waste_weight));
        }
        if !(self.order_cost >= 0.0 && self.order_cost.is_finite()) {
            return Err(EnvError::BadOrderCost(self.order_cost));
        }
        Ok(())
    }

    pub fn action_count(&self) -> usize {
        self.max_order as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingOrder {
    pub units: u32,
    pub arrival_step: u64,
}

/// Shelf and pipeline state. The shelf holds one entry per unit, its
/// remaining shelf life in days, kept sorted descending (freshest first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    stock: Vec<u32>,
    pipeline: VecDeque<PendingOrder>,
    step: u64,
}

impl StoreState {
    pub fn new() -> Self {
        Self { stock: Vec::new(), pipeline: VecDeque::new(), step: 0 }
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn stock_count(&self) -> usize {
        self.stock.len()
    }

    /// Remaining shelf lives, freshest first.
    pub fn stock(&self) -> &[u32] {
        &self.stock
    }

    pub fn pipeline(&self) -> &VecDeque<PendingOrder> {
        &self.pipeline
    }

    pub fn pipeline_units(&self) -> u32 {
        self.pipeline.iter().map(|o| o.units).sum()
    }

    /// On-hand plus in-transit units.
    pub fn inventory_position(&self) -> u32 {
        self.stock_count() as u32 + self.pipeline_units()
    }

    /// Adds up to `units` fresh units with the given shelf life, capping the
    /// shelf at `max_stock`. Returns how many units were actually shelved.
    pub fn add_stock(&mut self, units: u32, shelf_life: u32, max_stock: usize) -> u32 {
        debug_assert!(shelf_life >= 1, "fresh units must have at least one day left");
        let room = max_stock.saturating_sub(self.stock.len());
        let added = (units as usize).min(room);
        if added > 0 {
            let pos = self.stock.partition_point(|&s| s > shelf_life);
            self.stock.splice(pos..pos, std::iter::repeat(shelf_life).take(added));
        }
        added as u32
    }

    /// Serves demand freshest-first. Returns units sold (never more than the
    /// current stock count).
    pub fn sell_lifo(&mut self, demanded: u64) -> u32 {
        let sold = (demanded as usize).min(self.stock.len());
        self.stock.drain(..sold);
        sold as u32
    }

    /// Ages every unit by one day and discards expired ones. Returns the
    /// number of wasted units.
    pub fn end_of_day(&mut self) -> u32 {
        let before = self.stock.len();
        for s in &mut self.stock {
            *s -= 1;
        }
        self.stock.retain(|&s| s > 0);
        (before - self.stock.len()) as u32
    }

    fn push_order(&mut self, units: u32, lead_time: u32) {
        if units > 0 {
            self.pipeline.push_back(PendingOrder { units, arrival_step: self.step + lead_time as u64 });
        }
    }

    /// Pops every order due at the current step.
    fn due_orders(&mut self) -> u32 {
        let mut units = 0;
        while let Some(front) = self.pipeline.front() {
            if front.arrival_step == self.step {
                units += front.units;
                self.pipeline.pop_front();
            } else {
                debug_assert!(front.arrival_step > self.step, "stale order in pipeline");
                break;
            }
        }
        units
    }

    /// Stock as a fixed-width vector, descending with zero padding.
    pub fn stock_vector(&self, max_stock: usize) -> Vec<f64> {
        let mut v = vec![0.0; max_stock];
        for (i, &s) in self.stock.iter().take(max_stock).enumerate() {
            v[i] = s as f64;
        }
        v
    }
}

impl Default for StoreState {
    fn default() -> Self {
        Self::new()
    }
}

/// What a policy sees. The neural feature encoding uses the stock vector,
/// shelf life at order, forecast, cost, and price (fixed width
/// `max_stock + horizon_days + 3`); `pipeline_units` is carried alongside
/// for position-based policies and is not part of that encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Remaining shelf lives, descending, zero-padded to `max_stock`.
    pub stock_vector: Vec<f64>,
    /// Shelf life of a freshly delivered unit.
    pub shelf_life_at_order: u32,
    /// Expected units per future day, indices 1..=horizon days ahead.
    pub forecast: Vec<f64>,
    pub cost: f64,
    pub price: f64,
    /// Units currently in transit.
    pub pipeline_units: u32,
}

impl Observation {
    pub fn feature_width(max_stock: usize, horizon_days: usize) -> usize {
        max_stock + horizon_days + 3
    }

    pub fn is_finite(&self) -> bool {
        self.stock_vector.iter().all(|x| x.is_finite())
            && self.forecast.iter().all(|x| x.is_finite())
            && self.cost.is_finite()
            && self.price.is_finite()
    }
}

/// Everything observable about one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub ordered: u32,
    pub delivered: u32,
    pub demanded: u64,
    pub sold: u32,
    pub missed: u64,
    pub wasted: u32,
    /// Fraction of demand served; 1 when there was no demand.
    pub availability: f64,
}

/// Running totals used by audits and evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTotals {
    pub steps: u64,
    pub ordered: u64,
    pub delivered: u64,
    pub capped: u64,
    pub demanded: u64,
    pub sold: u64,
    pub missed: u64,
    pub wasted: u64,
    pub reward: f64,
    pub sales_reward: f64,
    pub waste_cost: f64,
    pub order_cost: f64,
    pub forecast_abs_error: f64,
    pub forecast_terms: u64,
}

impl EpisodeTotals {
    /// Mean absolute forecast error in probability units.
    pub fn forecast_mae(&self) -> f64 {
        if self.forecast_terms == 0 {
            0.0
        } else {
            self.forecast_abs_error / self.forecast_terms as f64
        }
    }

    /// Fraction of demand served over the episode; 1 when there was none.
    pub fn availability(&self) -> f64 {
        if self.demanded == 0 {
            1.0
        } else {
            self.sold as f64 / self.demanded as f64
        }
    }
}

/// The per-item POMDP.
#[derive(Debug, Clone)]
pub struct StoreEnv {
    item: PseudoItem,
    item_id: usize,
    market: Market,
    cfg: EnvConfig,
    state: StoreState,
    rng: ChaCha8Rng,
    day: u64,
    cursor: usize,
    day_customers: Vec<u64>,
    eps: f64,
    totals: EpisodeTotals,
}

impl StoreEnv {
    pub fn new(item: PseudoItem, item_id: usize, market: Market, cfg: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        let mut env = Self {
            item,
            item_id,
            market,
            cfg,
            state: StoreState::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            day: 0,
            cursor: 0,
            day_customers: Vec::new(),
            eps: 0.0,
            totals: EpisodeTotals::default(),
        };
        env.begin_day();
        Ok(env)
    }

    pub fn item(&self) -> &PseudoItem {
        &self.item
    }

    pub fn item_id(&self) -> usize {
        self.item_id
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn market(&self) -> &Market {
        &self.market
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn totals(&self) -> &EpisodeTotals {
        &self.totals
    }

    pub fn day(&self) -> u64 {
        self.day
    }

    /// Draws the new day's customers and forecast noise, and scores the
    /// fresh forecast against the true seasonal probabilities.
    fn begin_day(&mut self) {
        self.day_customers = self.market.customers.sample_day(&mut self.rng);
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.eps = self.market.forecast.sigma * z;
        for dt in 1..=self.market.forecast.horizon_days as u32 {
            let f = forecast_probability(
                &self.item,
                self.day,
                dt,
                self.eps,
                &self.market.seasonality,
                &self.market.forecast,
            );
            let p = purchase_probability(&self.item, self.day + dt as u64, &self.market.seasonality);
            self.totals.forecast_abs_error += (f - p).abs();
            self.totals.forecast_terms += 1;
        }
    }

    /// Observation for the upcoming decision.
    pub fn observation(&self) -> Observation {
        let forecast = (1..=self.market.forecast.horizon_days as u32)
            .map(|dt| self.market.expected_units(&self.item, self.day, dt, self.eps))
            .collect();
        Observation {
            stock_vector: self.state.stock_vector(self.cfg.max_stock),
            shelf_life_at_order: self.item.shelf_life,
            forecast,
            cost: self.item.cost,
            price: self.item.price,
            pipeline_units: self.state.pipeline_units(),
        }
    }

    /// Advances one sub-period. Rejects actions above the order cap; valid
    /// actions are additionally clamped to the shelf capacity.
    pub fn step(&mut self, action: u32) -> Result<(Observation, StepOutcome), EnvError> {
        if action > self.cfg.max_order {
            return Err(EnvError::ActionTooLarge { action, max_order: self.cfg.max_order });
        }
        let ordered = action.min(self.cfg.max_stock as u32);

        // Deliveries due this step enter the shelf before anything else.
        let due = self.state.due_orders();
        let delivered = self.state.add_stock(due, self.item.shelf_life, self.cfg.max_stock);
        let capped = due - delivered;

        // The order placed now arrives a lead time later.
        self.state.push_order(ordered, self.cfg.lead_time);

        // Demand for this sub-period.
        let customers = self.day_customers[self.cursor];
        let p = purchase_probability(&self.item, self.day, &self.market.seasonality);
        let demanded = realize_demand(customers, p, &mut self.rng);
        let sold = self.state.sell_lifo(demanded);
        let missed = demanded - sold as u64;
        let availability = if demanded == 0 { 1.0 } else { sold as f64 / demanded as f64 };

        // Day rollover: age stock after the last sub-period's demand.
        let tau = self.market.seasonality.sub_periods_per_day;
        let wasted = if self.cursor + 1 == tau { self.state.end_of_day() } else { 0 };

        let sales_reward = self.item.margin() * (sold as f64 - missed as f64);
        let waste_cost = wasted as f64 * self.item.cost;
        let order_cost = self.cfg.order_cost * ordered as f64;
        let reward = sales_reward - self.cfg.waste_weight * waste_cost - order_cost;

        self.state.step += 1;
        self.cursor += 1;
        if self.cursor == tau {
            self.cursor = 0;
            self.day += 1;
            self.begin_day();
        }

        self.totals.steps += 1;
        self.totals.ordered += ordered as u64;
        self.totals.delivered += delivered as u64;
        self.totals.capped += capped as u64;
        self.totals.demanded += demanded;
        self.totals.sold += sold as u64;
        self.totals.missed += missed;
        self.totals.wasted += wasted as u64;
        self.totals.reward += reward;
        self.totals.sales_reward += sales_reward;
        self.totals.waste_cost += waste_cost;
        self.totals.order_cost += order_cost;

        let outcome = StepOutcome {
            reward,
            ordered,
            delivered,
            demanded,
            sold,
            missed,
            wasted,
            availability,
        };
        Ok((self.observation(), outcome))
    }
}

/// One row of an episode trace CSV
/// (`step,item_id,action,delivered,demanded,sold,missed,wasted,reward,stock_count`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub item_id: usize,
    pub action: u32,
    pub delivered: u32,
    pub demanded: u64,
    pub sold: u32,
    pub missed: u64,
    pub wasted: u32,
    pub reward: f64,
    pub stock_count: usize,
}

impl TraceRow {
    pub fn from_outcome(step: u64, item_id: usize, action: u32, o: &StepOutcome, stock_count: usize) -> Self {
        Self {
            step,
            item_id,
            action,
            delivered: o.delivered,
            demanded: o.demanded,
            sold: o.sold,
            missed: o.missed,
            wasted: o.wasted,
            reward: o.reward,
            stock_count,
        }
    }
}
