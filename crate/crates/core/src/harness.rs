//! Experiment driver: configuration, deterministic seeding, the training
//! loop, paired evaluation against the (s, Q) baseline, result emission,
//! and the self-audit sweep.
//!
//! Evaluation is paired: for every (generation, item) the learned policy and
//! the baseline run on environments built from identical seeds, so both see
//! bitwise-identical demand. Normalized scores are therefore noise-paired
//! ratios, aggregated per generation from item totals.

use crate::agents::{ActionSelection, Agent, AgentConfig, AgentError, AgentKind, LossKind, ReplayBuffer, Transition};
use crate::env::{EnvConfig, EnvError, EpisodeTotals, Observation, StoreEnv, TraceRow};
use crate::gld::QuantileLevels;
use crate::items::{generate_items, CopulaModel, ItemError, ItemGenConfig, Marginal, PseudoItem};
use crate::market::{CustomerModel, ForecastConfig, Market, MarketError, SeasonalityConfig};
use crate::net::{AdamConfig, NetError, NetworkSpec};
use crate::par;
use crate::policy::{calibrate_sq, Policy, SqPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config:\n{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error("could not parse config: {0}")]
    Parse(String),
    #[error(transparent)]
    Items(#[from] ItemError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Forecast-noise scenario; the scenario fixes the noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    H0,
    H1,
    H2,
}

impl Scenario {
    pub fn sigma(&self) -> f64 {
        match self {
            Scenario::H0 => 0.0,
            Scenario::H1 => 0.05,
            Scenario::H2 => 0.15,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::H0 => "h0",
            Scenario::H1 => "h1",
            Scenario::H2 => "h2",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "h0" => Ok(Scenario::H0),
            "h1" => Ok(Scenario::H1),
            "h2" => Ok(Scenario::H2),
            other => Err(format!("unknown scenario {other:?}, expected h0, h1, or h2")),
        }
    }
}

pub const CONFIG_VERSION: u32 = 1;

/// One flat document drives everything: item generation, the market, the
/// environment, the agent, training, and evaluation. Every field has a
/// default, so a partial (even empty) TOML file is a valid config and the
/// manifest always shows fully resolved values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub master_seed: u64,
    pub scenario: Scenario,
    pub agent: AgentKind,

    // Item generation.
    pub copula_theta: f64,
    pub shelf_life_gamma_shape: f64,
    pub shelf_life_gamma_scale: f64,
    pub demand_lognorm_mu: f64,
    pub demand_lognorm_sigma: f64,
    pub markup_lognorm_mu: f64,
    pub markup_lognorm_sigma: f64,
    pub cost_gamma_shape: f64,
    pub cost_gamma_scale: f64,
    pub max_shelf_life: u32,
    pub base_demand_cap: f64,

    // Market.
    pub sub_periods_per_day: usize,
    pub customer_means: Vec<f64>,
    pub customer_std_frac: f64,
    pub customer_rho: f64,
    pub horizon_days: usize,

    // Environment.
    pub max_stock: usize,
    pub max_order: u32,
    pub lead_time: u32,
    pub waste_weight: f64,
    pub order_cost: f64,
    /// Fixed reorder point for the baseline; unset means each item is
    /// calibrated from its noise-free forecast.
    pub baseline_s: Option<u32>,
    /// Fixed order quantity for the baseline; unset means calibrated.
    pub baseline_q: Option<u32>,

    // Network.
    pub conv_kernel: usize,
    pub conv_channels: usize,
    pub trunk: Vec<usize>,

    // Agent.
    pub num_quantiles: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub target_sync_every: u64,
    pub replay_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_final: f64,
    pub epsilon_decay_steps: u64,
    pub huber_delta: f64,
    pub loss: LossKind,
    pub action_selection: ActionSelection,
    pub reward_scale: f64,
    /// Global gradient-norm clip; zero or negative disables clipping.
    pub grad_clip_norm: f64,

    // Training.
    pub train_items: usize,
    pub train_transitions: u64,
    pub train_episode_steps: u64,
    pub learning_starts: u64,
    pub update_every: u64,
    /// Checkpoint period in optimizer updates; zero writes only the final
    /// checkpoint.
    pub checkpoint_every: u64,

    // Evaluation.
    pub eval_generations: usize,
    pub eval_items_per_generation: usize,
    pub eval_steps: u64,
    pub write_trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            master_seed: 42,
            scenario: Scenario::H0,
            agent: AgentKind::Gtdqn,

            copula_theta: 2.0,
            shelf_life_gamma_shape: 3.0,
            shelf_life_gamma_scale: 3.0,
            demand_lognorm_mu: -3.0,
            demand_lognorm_sigma: 0.7,
            markup_lognorm_mu: -0.7,
            markup_lognorm_sigma: 0.4,
            cost_gamma_shape: 2.0,
            cost_gamma_scale: 2.0,
            max_shelf_life: 30,
            base_demand_cap: 0.5,

            sub_periods_per_day: 4,
            customer_means: vec![45.0, 25.0, 20.0, 30.0],
            customer_std_frac: 0.2,
            customer_rho: -0.3,
            horizon_days: 7,

            max_stock: 100,
            max_order: 20,
            lead_time: 4,
            waste_weight: 1.0,
            order_cost: 0.0,
            baseline_s: None,
            baseline_q: None,

            conv_kernel: 5,
            conv_channels: 4,
            trunk: vec![128, 64],

            num_quantiles: 9,
            gamma: 0.99,
            learning_rate: 1e-4,
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
            grad_clip_norm: 10.0,

            train_items: 100,
            train_transitions: 100_000,
            train_episode_steps: 500,
            learning_starts: 1_000,
            update_every: 4,
            checkpoint_every: 0,

            eval_generations: 5,
            eval_items_per_generation: 50,
            eval_steps: 500,
            write_trace: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Checks every field and reports all problems at once rather than
    /// stopping at the first.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut errs = Vec::new();
        if self.config_version != CONFIG_VERSION {
            errs.push(format!(
                "config_version {} is not supported (this build reads version {CONFIG_VERSION})",
                self.config_version
            ));
        }
        if let Err(e) = self.copula_model() {
            errs.push(format!("item generation: {e}"));
        }
        if self.max_shelf_life == 0 {
            errs.push("max_shelf_life must be at least 1".into());
        }
        if !(self.base_demand_cap > 0.0 && self.base_demand_cap <= 1.0) {
            errs.push(format!("base_demand_cap must lie in (0, 1], got {}", self.base_demand_cap));
        }
        if self.customer_means.len() != self.sub_periods_per_day {
            errs.push(format!(
                "customer_means has {} entries but sub_periods_per_day is {}",
                self.customer_means.len(),
                self.sub_periods_per_day
            ));
        }
        if let Err(e) = self.market() {
            errs.push(format!("market: {e}"));
        }
        if let Err(e) = self.env_config().validate() {
            errs.push(format!("environment: {e}"));
        }
        if self.max_order as usize > self.max_stock {
            errs.push(format!(
                "max_order {} exceeds max_stock {}; such orders could never fit",
                self.max_order, self.max_stock
            ));
        }
        if let Some(q) = self.baseline_q {
            if q > self.max_order {
                errs.push(format!(
                    "baseline_q {q} exceeds max_order {}; the baseline could never place it",
                    self.max_order
                ));
            }
        }
        if let Err(e) = self.network_spec().validate() {
            errs.push(format!("network: {e}"));
        }
        if let Err(e) = self.agent_config().validate() {
            errs.push(format!("agent: {e}"));
        }
        for (name, v) in [
            ("train_items", self.train_items),
            ("eval_generations", self.eval_generations),
            ("eval_items_per_generation", self.eval_items_per_generation),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("train_transitions", self.train_transitions),
            ("train_episode_steps", self.train_episode_steps),
            ("update_every", self.update_every),
            ("eval_steps", self.eval_steps),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(errs))
        }
    }

    pub fn sigma(&self) -> f64 {
        self.scenario.sigma()
    }

    pub fn copula_model(&self) -> Result<CopulaModel, ItemError> {
        CopulaModel::new(
            self.copula_theta,
            [
                Marginal::Gamma { shape: self.shelf_life_gamma_shape, scale: self.shelf_life_gamma_scale },
                Marginal::LogNormal { mu: self.demand_lognorm_mu, sigma: self.demand_lognorm_sigma },
                Marginal::LogNormal { mu: self.markup_lognorm_mu, sigma: self.markup_lognorm_sigma },
                Marginal::Gamma { shape: self.cost_gamma_shape, scale: self.cost_gamma_scale },
            ],
        )
    }

    pub fn item_gen_config(&self) -> ItemGenConfig {
        ItemGenConfig { max_shelf_life: self.max_shelf_life, base_demand_cap: self.base_demand_cap }
    }

    pub fn market(&self) -> Result<Market, MarketError> {
        let season = SeasonalityConfig {
            sub_periods_per_day: self.sub_periods_per_day,
            ..SeasonalityConfig::default()
        };
        let stds: Vec<f64> = self.customer_means.iter().map(|&m| m * self.customer_std_frac).collect();
        let customers = CustomerModel::from_correlation(self.customer_means.clone(), stds, self.customer_rho)?;
        let forecast = ForecastConfig { sigma: self.sigma(), horizon_days: self.horizon_days };
        Market::new(season, customers, forecast)
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            max_stock: self.max_stock,
            max_order: self.max_order,
            lead_time: self.lead_time,
            waste_weight: self.waste_weight,
            order_cost: self.order_cost,
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            stock_len: self.max_stock,
            horizon: self.horizon_days,
            conv_kernel: self.conv_kernel,
            conv_channels: self.conv_channels,
            trunk: self.trunk.clone(),
            actions: self.max_order as usize + 1,
            outputs_per_action: self.agent.outputs_per_action(self.num_quantiles),
            stock_scale: self.max_shelf_life as f64,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            kind: self.agent,
            num_quantiles: self.num_quantiles,
            gamma: self.gamma,
            adam: AdamConfig {
                lr: self.learning_rate,
                clip_norm: if self.grad_clip_norm > 0.0 { Some(self.grad_clip_norm) } else { None },
                ..AdamConfig::default()
            },
            batch_size: self.batch_size,
            target_sync_every: self.target_sync_every,
            replay_capacity: self.replay_capacity,
            epsilon_start: self.epsilon_start,
            epsilon_final: self.epsilon_final,
            epsilon_decay_steps: self.epsilon_decay_steps,
            huber_delta: self.huber_delta,
            loss: self.loss,
            action_selection: self.action_selection,
            reward_scale: self.reward_scale,
        }
    }
}

// Seed derivation: every random stream hangs off the master seed through a
// purpose tag and two indices, so streams never collide across uses.
const P_TRAIN_ITEMS: u64 = 1;
const P_EVAL_ITEMS: u64 = 2;
const P_TRAIN_ENV: u64 = 3;
const P_EVAL_ENV: u64 = 4;
const P_AGENT_INIT: u64 = 5;
const P_EXPLORE: u64 = 6;
const P_REPLAY: u64 = 7;
const P_AUDIT_ENV: u64 = 8;
const P_AUDIT_ACTIONS: u64 = 9;
const P_EVAL_POLICY: u64 = 10;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes (master, purpose, a, b) into one well-spread seed.
pub fn derive_seed(master: u64, purpose: u64, a: u64, b: u64) -> u64 {
    let mut x = splitmix64(master ^ 0xD1B5_4A32_D192_ED03);
    x = splitmix64(x ^ purpose);
    x = splitmix64(x ^ a);
    x = splitmix64(x ^ b);
    x
}

/// Seed of the training-assortment item stream; `generate-items` uses the
/// same stream so a saved CSV matches what training would draw.
pub fn derive_seed_for_items(master: u64) -> u64 {
    derive_seed(master, P_TRAIN_ITEMS, 0, 0)
}

/// Builds the per-item policy a run is evaluated with. The baseline factory
/// recalibrates (s, Q) for each item; an agent factory ignores the item and
/// always plays its network greedily.
pub trait PolicyFactory: Sync {
    fn policy_for(&self, item_id: usize, item: &PseudoItem) -> Box<dyn Policy + Send + '_>;
    fn name(&self) -> &str;
}

/// The classical baseline: per-item calibrated (s, Q), with optional fixed
/// values pinned from the experiment config.
pub struct SqFactory {
    pub market: Market,
    pub lead_time: u32,
    pub max_order: u32,
    pub fixed_s: Option<u32>,
    pub fixed_q: Option<u32>,
}

impl SqFactory {
    pub fn from_config(cfg: &ExperimentConfig, market: Market) -> Self {
        SqFactory {
            market,
            lead_time: cfg.lead_time,
            max_order: cfg.max_order,
            fixed_s: cfg.baseline_s,
            fixed_q: cfg.baseline_q,
        }
    }
}

impl PolicyFactory for SqFactory {
    fn policy_for(&self, _item_id: usize, item: &PseudoItem) -> Box<dyn Policy + Send + '_> {
        let mut params = calibrate_sq(item, &self.market, self.lead_time, self.max_order);
        if let Some(s) = self.fixed_s {
            params.s = s;
        }
        if let Some(q) = self.fixed_q {
            params.q = q.min(self.max_order);
        }
        Box::new(SqPolicy::new(params, self.max_order))
    }

    fn name(&self) -> &str {
        "sq-baseline"
    }
}

struct GreedyAgentPolicy<'a>(&'a Agent);

impl Policy for GreedyAgentPolicy<'_> {
    fn act(&self, obs: &Observation, explore: bool, rng: &mut ChaCha8Rng) -> u32 {
        let features = self.0.encode(obs);
        if explore {
            self.0.act(&features, self.0.config().epsilon_final, rng)
        } else {
            self.0.greedy_action(&features)
        }
    }
}

impl PolicyFactory for Agent {
    fn policy_for(&self, _item_id: usize, _item: &PseudoItem) -> Box<dyn Policy + Send + '_> {
        Box::new(GreedyAgentPolicy(self))
    }

    fn name(&self) -> &str {
        self.config().kind.name()
    }
}

/// One training-log row per optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub update_idx: u64,
    pub loss: f64,
    pub epsilon: f64,
    pub mean_q_or_mean_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub env_steps: u64,
    pub updates: u64,
    pub optimizer_skips: u64,
    pub crossing_events: u64,
    pub crossing_checked: u64,
    pub final_epsilon: f64,
}

pub struct TrainingRun {
    pub agent: Agent,
    pub log: Vec<TrainLogRow>,
    pub summary: TrainingSummary,
}

/// Trains the configured agent on freshly generated items, round-robin over
/// episodes, and returns the trained agent plus the update log. If
/// `checkpoint_dir` is given and `checkpoint_every > 0`, intermediate
/// checkpoints land there.
pub fn run_training(cfg: &ExperimentConfig, checkpoint_dir: Option<&Path>) -> Result<TrainingRun, HarnessError> {
    cfg.validate()?;
    let master = cfg.master_seed;
    let market = cfg.market()?;
    let env_cfg = cfg.env_config();

    let mut item_rng = ChaCha8Rng::seed_from_u64(derive_seed(master, P_TRAIN_ITEMS, 0, 0));
    let items = generate_items(&cfg.copula_model()?, &cfg.item_gen_config(), cfg.train_items, &mut item_rng)?;

    let mut agent = Agent::new(cfg.agent_config(), cfg.network_spec(), derive_seed(master, P_AGENT_INIT, 0, 0))?;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity)?;
    let mut explore_rng = ChaCha8Rng::seed_from_u64(derive_seed(master, P_EXPLORE, 0, 0));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(derive_seed(master, P_REPLAY, 0, 0));

    let mut log = Vec::new();
    let mut env_steps: u64 = 0;
    let mut episode: u64 = 0;
    let agent_cfg = cfg.agent_config();

    'outer: loop {
        let item_idx = (episode as usize) % items.len();
        let seed = derive_seed(master, P_TRAIN_ENV, episode, item_idx as u64);
        let mut env = StoreEnv::new(items[item_idx].clone(), item_idx, market.clone(), env_cfg, seed)?;
        let mut obs = env.observation();
        for _ in 0..cfg.train_episode_steps {
            let features = agent.encode(&obs);
            let epsilon = agent_cfg.epsilon_at(env_steps);
            let action = agent.act(&features, epsilon, &mut explore_rng);
            let (next_obs, outcome) = env.step(action)?;
            let next_features = agent.encode(&next_obs);
            // The task is continuing; episode ends are truncations, never
            // terminal states, so bootstrapping stays on.
            replay.push(Transition {
                features,
                action,
                reward: outcome.reward,
                next_features,
                done: false,
            });
            obs = next_obs;
            env_steps += 1;

            if env_steps >= cfg.learning_starts && env_steps % cfg.update_every == 0 {
                let batch = replay.sample(cfg.batch_size, &mut replay_rng)?;
                let report = agent.update(&batch)?;
                log.push(TrainLogRow {
                    update_idx: agent.updates(),
                    loss: report.loss,
                    epsilon,
                    mean_q_or_mean_lambda: report.mean_value,
                });
                if let (Some(dir), true) = (checkpoint_dir, cfg.checkpoint_every > 0) {
                    if report.applied && agent.updates() % cfg.checkpoint_every == 0 {
                        agent.save(&dir.join(format!("checkpoint_{:07}.json", agent.updates())))?;
                    }
                }
            }
            if env_steps >= cfg.train_transitions {
                break 'outer;
            }
        }
        episode += 1;
    }

    let (crossing_events, crossing_checked) = agent.crossing_stats();
    let summary = TrainingSummary {
        env_steps,
        updates: agent.updates(),
        optimizer_skips: agent.optimizer_skips(),
        crossing_events,
        crossing_checked,
        final_epsilon: agent_cfg.epsilon_at(env_steps),
    };
    Ok(TrainingRun { agent, log, summary })
}

/// Everything measured for one item under one policy pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemEvalOutcome {
    pub item_id: usize,
    pub subject: EpisodeTotals,
    pub baseline: EpisodeTotals,
    /// Set when the baseline earned no profit on this item, which removes
    /// the item from the normalization sums (it is reported separately).
    pub excluded: bool,
    #[serde(skip)]
    pub subject_trace: Option<Vec<TraceRow>>,
    #[serde(skip)]
    pub baseline_trace: Option<Vec<TraceRow>>,
}

/// Per-generation aggregate, one results-CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub generation: usize,
    pub agent_profit: f64,
    pub baseline_profit: f64,
    pub norm_profit_pct: f64,
    pub agent_waste: u64,
    pub baseline_waste: u64,
    /// NaN when the baseline wasted nothing.
    pub norm_waste_pct: f64,
}

/// Side information per generation that does not go into the CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationDetail {
    pub excluded_items: usize,
    pub excluded_agent_profit: f64,
    pub excluded_baseline_profit: f64,
    pub forecast_mae: f64,
    pub agent_availability: f64,
    pub baseline_availability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub scenario: Scenario,
    pub sigma: f64,
    pub generations: Vec<GenerationResult>,
    pub details: Vec<GenerationDetail>,
    pub mean_norm_profit_pct: f64,
    /// Median absolute deviation of the per-generation normalized profit.
    pub profit_mad: f64,
    /// Standard error of the per-generation normalized profit.
    pub profit_se: f64,
    pub mean_norm_waste_pct: f64,
    pub waste_mad: f64,
    pub waste_se: f64,
    #[serde(skip)]
    pub items: Vec<Vec<ItemEvalOutcome>>,
}

/// Runs one policy and the paired baseline over a single item.
fn run_paired_item(
    market: &Market,
    env_cfg: &EnvConfig,
    item: &PseudoItem,
    item_id: usize,
    env_seed: u64,
    policy_seed: u64,
    subject: &dyn PolicyFactory,
    baseline: &SqFactory,
    steps: u64,
    collect_trace: bool,
) -> Result<ItemEvalOutcome, HarnessError> {
    let run = |factory_policy: Box<dyn Policy + Send + '_>| -> Result<(EpisodeTotals, Option<Vec<TraceRow>>), HarnessError> {
        let mut env = StoreEnv::new(item.clone(), item_id, market.clone(), *env_cfg, env_seed)?;
        let mut policy_rng = ChaCha8Rng::seed_from_u64(policy_seed);
        let mut trace = collect_trace.then(Vec::new);
        let mut obs = env.observation();
        for step in 0..steps {
            let action = factory_policy.act(&obs, false, &mut policy_rng);
            let (next_obs, outcome) = env.step(action)?;
            if let Some(rows) = trace.as_mut() {
                rows.push(TraceRow::from_outcome(step, item_id, action, &outcome, env.state().stock_count()));
            }
            obs = next_obs;
        }
        Ok((*env.totals(), trace))
    };

    let (subject_totals, subject_trace) = run(subject.policy_for(item_id, item))?;
    let (baseline_totals, baseline_trace) = run(baseline.policy_for(item_id, item))?;
    Ok(ItemEvalOutcome {
        item_id,
        subject: subject_totals,
        baseline: baseline_totals,
        excluded: baseline_totals.reward <= 0.0,
        subject_trace,
        baseline_trace,
    })
}

/// Evaluates one generation of items, in parallel when the `parallel`
/// feature is on. Item order in the result is deterministic either way.
pub fn evaluate_generation(
    cfg: &ExperimentConfig,
    market: &Market,
    items: &[PseudoItem],
    generation: usize,
    subject: &dyn PolicyFactory,
    collect_trace: bool,
) -> Result<Vec<ItemEvalOutcome>, HarnessError> {
    let env_cfg = cfg.env_config();
    let baseline = SqFactory::from_config(cfg, market.clone());
    let results = par::map_indexed(items.len(), |i| {
        run_paired_item(
            market,
            &env_cfg,
            &items[i],
            i,
            derive_seed(cfg.master_seed, P_EVAL_ENV, generation as u64, i as u64),
            derive_seed(cfg.master_seed, P_EVAL_POLICY, generation as u64, i as u64),
            subject,
            &baseline,
            cfg.eval_steps,
            collect_trace,
        )
    });
    results.into_iter().collect()
}

/// Single-threaded twin of `evaluate_generation`, kept for benchmarks and
/// determinism cross-checks.
pub fn evaluate_generation_sequential(
    cfg: &ExperimentConfig,
    market: &Market,
    items: &[PseudoItem],
    generation: usize,
    subject: &dyn PolicyFactory,
    collect_trace: bool,
) -> Result<Vec<ItemEvalOutcome>, HarnessError> {
    let env_cfg = cfg.env_config();
    let baseline = SqFactory::from_config(cfg, market.clone());
    let results = par::map_indexed_seq(items.len(), |i| {
        run_paired_item(
            market,
            &env_cfg,
            &items[i],
            i,
            derive_seed(cfg.master_seed, P_EVAL_ENV, generation as u64, i as u64),
            derive_seed(cfg.master_seed, P_EVAL_POLICY, generation as u64, i as u64),
            subject,
            &baseline,
            cfg.eval_steps,
            collect_trace,
        )
    });
    results.into_iter().collect()
}

fn aggregate_generation(generation: usize, items: &[ItemEvalOutcome]) -> (GenerationResult, GenerationDetail) {
    let mut agent_profit = 0.0;
    let mut baseline_profit = 0.0;
    let mut agent_waste = 0u64;
    let mut baseline_waste = 0u64;
    let mut excluded_items = 0usize;
    let mut excluded_agent_profit = 0.0;
    let mut excluded_baseline_profit = 0.0;
    let mut mae_sum = 0.0;
    let mut agent_sold = 0u64;
    let mut agent_demanded = 0u64;
    let mut baseline_sold = 0u64;
    let mut baseline_demanded = 0u64;
    for it in items {
        mae_sum += it.subject.forecast_mae();
        agent_sold += it.subject.sold;
        agent_demanded += it.subject.demanded;
        baseline_sold += it.baseline.sold;
        baseline_demanded += it.baseline.demanded;
        if it.excluded {
            excluded_items += 1;
            excluded_agent_profit += it.subject.reward;
            excluded_baseline_profit += it.baseline.reward;
        } else {
            agent_profit += it.subject.reward;
            baseline_profit += it.baseline.reward;
            agent_waste += it.subject.wasted;
            baseline_waste += it.baseline.wasted;
        }
    }
    let norm_profit_pct = 100.0 * agent_profit / baseline_profit;
    let norm_waste_pct = if baseline_waste == 0 {
        f64::NAN
    } else {
        100.0 * agent_waste as f64 / baseline_waste as f64
    };
    let result = GenerationResult {
        generation,
        agent_profit,
        baseline_profit,
        norm_profit_pct,
        agent_waste,
        baseline_waste,
        norm_waste_pct,
    };
    let detail = GenerationDetail {
        excluded_items,
        excluded_agent_profit,
        excluded_baseline_profit,
        forecast_mae: mae_sum / items.len() as f64,
        agent_availability: if agent_demanded == 0 { 1.0 } else { agent_sold as f64 / agent_demanded as f64 },
        baseline_availability: if baseline_demanded == 0 {
            1.0
        } else {
            baseline_sold as f64 / baseline_demanded as f64
        },
    };
    (result, detail)
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in median input"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation: robust spread across generations.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let devs: Vec<f64> = values.iter().map(|&x| (x - m).abs()).collect();
    median(&devs)
}

/// Standard error of the mean (sample standard deviation over sqrt n);
/// zero for fewer than two values.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// The exact item portfolio scored in one evaluation generation. Exposed so
/// callers can precompute portfolio-wide statistics (say, a store-wide
/// (s, Q) pin) against the same items the evaluation will price.
pub fn eval_items(cfg: &ExperimentConfig, generation: usize) -> Result<Vec<PseudoItem>, HarnessError> {
    let model = cfg.copula_model()?;
    let gen_cfg = cfg.item_gen_config();
    let mut item_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, P_EVAL_ITEMS, generation as u64, 0));
    Ok(generate_items(&model, &gen_cfg, cfg.eval_items_per_generation, &mut item_rng)?)
}

/// Evaluates `subject` against the paired (s, Q) baseline over fresh item
/// generations. Pass the trained agent, or any other policy factory.
pub fn run_evaluation(cfg: &ExperimentConfig, subject: &dyn PolicyFactory) -> Result<EvalResult, HarnessError> {
    cfg.validate()?;
    let market = cfg.market()?;

    let mut generations = Vec::with_capacity(cfg.eval_generations);
    let mut details = Vec::with_capacity(cfg.eval_generations);
    let mut all_items = Vec::with_capacity(cfg.eval_generations);
    for g in 0..cfg.eval_generations {
        let items = eval_items(cfg, g)?;
        let collect_trace = cfg.write_trace && g == 0;
        let outcomes = evaluate_generation(cfg, &market, &items, g, subject, collect_trace)?;
        let (result, detail) = aggregate_generation(g, &outcomes);
        generations.push(result);
        details.push(detail);
        all_items.push(outcomes);
    }

    let profits: Vec<f64> = generations.iter().map(|g| g.norm_profit_pct).collect();
    let wastes: Vec<f64> =
        generations.iter().map(|g| g.norm_waste_pct).filter(|w| w.is_finite()).collect();
    let (waste_mean, waste_mad, waste_se) = if wastes.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        (wastes.iter().sum::<f64>() / wastes.len() as f64, mad(&wastes), standard_error(&wastes))
    };
    Ok(EvalResult {
        scenario: cfg.scenario,
        sigma: cfg.sigma(),
        mean_norm_profit_pct: profits.iter().sum::<f64>() / profits.len() as f64,
        profit_mad: mad(&profits),
        profit_se: standard_error(&profits),
        mean_norm_waste_pct: waste_mean,
        waste_mad,
        waste_se,
        generations,
        details,
        items: all_items,
    })
}

/// Seeds recorded in the manifest so any single episode can be replayed.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestSeeds {
    pub master: u64,
    pub train_items: u64,
    pub agent_init: u64,
    pub exploration: u64,
    pub replay: u64,
    /// Per evaluation generation: the item-generation seed and the
    /// environment seed of item 0. Environment seeds for item i follow the
    /// same derivation with b = i.
    pub eval_generations: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub config: &'a ExperimentConfig,
    pub sigma: f64,
    pub agent: &'a str,
    pub seeds: ManifestSeeds,
    pub mean_norm_profit_pct: f64,
    pub profit_mad: f64,
    pub profit_se: f64,
    pub mean_norm_waste_pct: f64,
    pub waste_mad: f64,
    pub waste_se: f64,
    pub excluded_items_per_generation: Vec<usize>,
    pub forecast_mae_per_generation: Vec<f64>,
}

/// Writes `results.csv`, `manifest.json`, and (when traces were collected)
/// `trace_agent.csv` / `trace_baseline.csv` into `out_dir`.
pub fn emit_results(
    cfg: &ExperimentConfig,
    result: &EvalResult,
    subject_name: &str,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;

    let mut w = csv::Writer::from_path(out_dir.join("results.csv"))?;
    for row in &result.generations {
        w.serialize(row)?;
    }
    w.flush()?;

    let seeds = ManifestSeeds {
        master: cfg.master_seed,
        train_items: derive_seed(cfg.master_seed, P_TRAIN_ITEMS, 0, 0),
        agent_init: derive_seed(cfg.master_seed, P_AGENT_INIT, 0, 0),
        exploration: derive_seed(cfg.master_seed, P_EXPLORE, 0, 0),
        replay: derive_seed(cfg.master_seed, P_REPLAY, 0, 0),
        eval_generations: (0..cfg.eval_generations)
            .map(|g| {
                (
                    derive_seed(cfg.master_seed, P_EVAL_ITEMS, g as u64, 0),
                    derive_seed(cfg.master_seed, P_EVAL_ENV, g as u64, 0),
                )
            })
            .collect(),
    };
    let manifest = Manifest {
        config: cfg,
        sigma: result.sigma,
        agent: subject_name,
        seeds,
        mean_norm_profit_pct: result.mean_norm_profit_pct,
        profit_mad: result.profit_mad,
        profit_se: result.profit_se,
        mean_norm_waste_pct: result.mean_norm_waste_pct,
        waste_mad: result.waste_mad,
        waste_se: result.waste_se,
        excluded_items_per_generation: result.details.iter().map(|d| d.excluded_items).collect(),
        forecast_mae_per_generation: result.details.iter().map(|d| d.forecast_mae).collect(),
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(out_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    file.write_all(b"\n")?;
    file.flush()?;

    let has_traces = result.items.first().map_or(false, |items| items.iter().any(|i| i.subject_trace.is_some()));
    if has_traces {
        let mut agent_w = csv::Writer::from_path(out_dir.join("trace_agent.csv"))?;
        let mut base_w = csv::Writer::from_path(out_dir.join("trace_baseline.csv"))?;
        for item in &result.items[0] {
            for row in item.subject_trace.iter().flatten() {
                agent_w.serialize(row)?;
            }
            for row in item.baseline_trace.iter().flatten() {
                base_w.serialize(row)?;
            }
        }
        agent_w.flush()?;
        base_w.flush()?;
    }
    Ok(())
}

/// Writes the per-update training log CSV (`update_idx,loss,epsilon,
/// mean_q_or_mean_lambda`).
pub fn write_training_log(log: &[TrainLogRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// What the audit sweep found. All counters must be zero for a healthy
/// build.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub episodes: u64,
    pub steps: u64,
    pub reward_mismatches: u64,
    pub lifo_mismatches: u64,
    pub conservation_violations: u64,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.reward_mismatches == 0 && self.lifo_mismatches == 0 && self.conservation_violations == 0
    }
}

/// Replays random-policy episodes against an independent shadow model:
/// a sorted-multiset shelf that must match the environment's stock exactly,
/// a bitwise reward recomputation from the step outcome, and the
/// delivered = sold + wasted + on-hand conservation identity.
pub fn run_audit(cfg: &ExperimentConfig, episodes: u64, steps_per_episode: u64) -> Result<AuditReport, HarnessError> {
    cfg.validate()?;
    let market = cfg.market()?;
    let env_cfg = cfg.env_config();
    let model = cfg.copula_model()?;
    let gen_cfg = cfg.item_gen_config();
    let mut report = AuditReport::default();

    for e in 0..episodes {
        let mut item_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, P_AUDIT_ENV, e, 1));
        let item = generate_items(&model, &gen_cfg, 1, &mut item_rng)?.remove(0);
        let mut env = StoreEnv::new(
            item.clone(),
            e as usize,
            market.clone(),
            env_cfg,
            derive_seed(cfg.master_seed, P_AUDIT_ENV, e, 0),
        )?;
        let mut action_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, P_AUDIT_ACTIONS, e, 0));
        // Shadow shelf: a plain descending vector maintained only from step
        // outcomes, never from the environment's internals.
        let mut shadow: Vec<u32> = Vec::new();
        let mut day_step = 0u64;
        let tau = cfg.sub_periods_per_day as u64;
        for _ in 0..steps_per_episode {
            let action = action_rng.gen_range(0..=cfg.max_order);
            let (_, o) = env.step(action)?;
            report.steps += 1;

            // Shadow model: deliveries are fresh units, sales take the
            // freshest, day end ages everything and drops expired units.
            for _ in 0..o.delivered {
                let pos = shadow.partition_point(|&s| s > item.shelf_life);
                shadow.insert(pos, item.shelf_life);
            }
            shadow.drain(..(o.sold as usize).min(shadow.len()));
            if (day_step + 1) % tau == 0 {
                let mut wasted = 0u32;
                shadow.retain_mut(|s| {
                    *s -= 1;
                    if *s == 0 {
                        wasted += 1;
                        false
                    } else {
                        true
                    }
                });
                if wasted != o.wasted {
                    report.lifo_mismatches += 1;
                }
            } else if o.wasted != 0 {
                report.lifo_mismatches += 1;
            }
            day_step += 1;
            if shadow.as_slice() != env.state().stock() {
                report.lifo_mismatches += 1;
            }

            // Bitwise reward recomputation from outcome counts.
            let expected = item.margin() * (o.sold as f64 - o.missed as f64)
                - cfg.waste_weight * (o.wasted as f64 * item.cost)
                - cfg.order_cost * o.ordered as f64;
            if expected.to_bits() != o.reward.to_bits() {
                report.reward_mismatches += 1;
            }
        }
        let t = env.totals();
        if t.delivered != t.sold + t.wasted + env.state().stock_count() as u64 {
            report.conservation_violations += 1;
        }
        if t.ordered != t.delivered + t.capped + env.state().pipeline_units() as u64 {
            report.conservation_violations += 1;
        }
        report.episodes += 1;
    }
    Ok(report)
}

/// Convenience wrapper used by tests and the quantile CLI flag: the
/// spec-blessed level counts.
pub fn quantile_levels_for(n: usize) -> QuantileLevels {
    QuantileLevels::midpoints(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A config small enough for tests to run in well under a second each.
    fn micro_cfg() -> ExperimentConfig {
        ExperimentConfig {
            max_stock: 16,
            max_order: 5,
            lead_time: 2,
            conv_kernel: 3,
            conv_channels: 2,
            trunk: vec![16, 12],
            num_quantiles: 5,
            batch_size: 8,
            replay_capacity: 512,
            target_sync_every: 25,
            learning_rate: 1e-3,
            epsilon_decay_steps: 300,
            train_items: 3,
            train_transitions: 400,
            train_episode_steps: 100,
            learning_starts: 64,
            update_every: 4,
            eval_generations: 3,
            eval_items_per_generation: 4,
            eval_steps: 120,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn empty_toml_gives_defaults_and_partial_overrides() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let cfg = ExperimentConfig::from_toml_str(
            "scenario = \"h2\"\nagent = \"qr-dqn\"\nmax_order = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.scenario, Scenario::H2);
        assert_eq!(cfg.agent, AgentKind::QrDqn);
        assert_eq!(cfg.max_order, 10);
        assert_eq!(cfg.max_stock, 100, "untouched fields keep defaults");
        assert!((cfg.sigma() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("max_stok = 50\n").unwrap_err();
        assert!(matches!(err, HarnessError::Parse(_)));
    }

    #[test]
    fn validation_reports_every_problem_at_once() {
        let cfg = ExperimentConfig {
            copula_theta: -1.0,
            max_order: 200,
            train_items: 0,
            eval_steps: 0,
            gamma: 1.5,
            ..ExperimentConfig::default()
        };
        match cfg.validate() {
            Err(HarnessError::Config(errs)) => {
                assert!(errs.len() >= 5, "want all five problems listed, got {errs:?}");
                assert!(errs.iter().any(|e| e.contains("item generation")));
                assert!(errs.iter().any(|e| e.contains("max_order")));
                assert!(errs.iter().any(|e| e.contains("train_items")));
                assert!(errs.iter().any(|e| e.contains("eval_steps")));
                assert!(errs.iter().any(|e| e.contains("gamma")));
            }
            other => panic!("expected config error list, got {other:?}"),
        }
    }

    #[test]
    fn baseline_overrides_pin_every_item() {
        let cfg = ExperimentConfig::from_toml_str("baseline_s = 7\nbaseline_q = 3\n").unwrap();
        assert_eq!((cfg.baseline_s, cfg.baseline_q), (Some(7), Some(3)));
        cfg.validate().unwrap();

        let market = cfg.market().unwrap();
        let factory = SqFactory::from_config(&cfg, market);
        let model = cfg.copula_model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let items = generate_items(&model, &cfg.item_gen_config(), 3, &mut rng).unwrap();
        let empty_shelf = Observation {
            stock_vector: vec![0.0; cfg.max_stock],
            shelf_life_at_order: 5,
            forecast: vec![0.4; cfg.horizon_days],
            cost: 1.0,
            price: 2.0,
            pipeline_units: 0,
        };
        for (i, item) in items.iter().enumerate() {
            let policy = factory.policy_for(i, item);
            let a = policy.act(&empty_shelf, false, &mut rng);
            assert_eq!(a, 3, "an empty shelf draws the pinned quantity for every item");
        }

        let bad = ExperimentConfig {
            baseline_q: Some(99),
            ..ExperimentConfig::default()
        };
        match bad.validate() {
            Err(HarnessError::Config(errs)) => {
                assert!(errs.iter().any(|e| e.contains("baseline_q")));
            }
            other => panic!("expected config error list, got {other:?}"),
        }
    }

    #[test]
    fn scenario_sigmas_and_parsing() {
        assert_eq!(Scenario::H0.sigma(), 0.0);
        assert_eq!(Scenario::H1.sigma(), 0.05);
        assert_eq!(Scenario::H2.sigma(), 0.15);
        assert_eq!("H1".parse::<Scenario>().unwrap(), Scenario::H1);
        assert!("h9".parse::<Scenario>().is_err());
    }

    #[test]
    fn seed_derivation_spreads_and_repeats() {
        let a = derive_seed(42, P_EVAL_ENV, 3, 7);
        assert_eq!(a, derive_seed(42, P_EVAL_ENV, 3, 7), "deterministic");
        assert_ne!(a, derive_seed(42, P_EVAL_ENV, 3, 8));
        assert_ne!(a, derive_seed(42, P_EVAL_ENV, 4, 7));
        assert_ne!(a, derive_seed(42, P_EVAL_POLICY, 3, 7));
        assert_ne!(a, derive_seed(43, P_EVAL_ENV, 3, 7));
        // No collisions over a dense grid.
        let mut seen = std::collections::HashSet::new();
        for p in 1..=10u64 {
            for x in 0..50u64 {
                for y in 0..20u64 {
                    assert!(seen.insert(derive_seed(42, p, x, y)));
                }
            }
        }
    }

    #[test]
    fn median_and_mad_reference_values() {
        assert_eq!(median(&[1.0, 2.0, 9.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert_eq!(mad(&[1.0, 2.0, 9.0]), 1.0, "deviations 1, 0, 7 have median 1");
        assert_eq!(mad(&[5.0, 5.0, 5.0]), 0.0);
        let se = standard_error(&[1.0, 2.0, 3.0]);
        assert!((se - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(standard_error(&[7.0]), 0.0);
    }

    #[test]
    fn baseline_against_itself_is_exactly_100_percent() {
        let cfg = micro_cfg();
        let market = cfg.market().unwrap();
        let mirror = SqFactory::from_config(&cfg, market);
        let result = run_evaluation(&cfg, &mirror).unwrap();
        for g in &result.generations {
            assert_eq!(g.norm_profit_pct, 100.0, "generation {}", g.generation);
            assert_eq!(g.agent_profit, g.baseline_profit);
            assert_eq!(g.agent_waste, g.baseline_waste);
            if g.baseline_waste > 0 {
                assert_eq!(g.norm_waste_pct, 100.0);
            } else {
                assert!(g.norm_waste_pct.is_nan());
            }
        }
        assert_eq!(result.mean_norm_profit_pct, 100.0);
        assert_eq!(result.profit_mad, 0.0);
    }

    #[test]
    fn paired_runs_see_identical_demand() {
        let cfg = micro_cfg();
        let market = cfg.market().unwrap();
        let mirror = SqFactory::from_config(&cfg, market);
        let result = run_evaluation(&cfg, &mirror).unwrap();
        for generation in &result.items {
            for item in generation {
                assert_eq!(item.subject.demanded, item.baseline.demanded);
                assert_eq!(item.subject.steps, item.baseline.steps);
            }
        }
    }

    #[test]
    fn forecast_error_grows_with_scenario_noise() {
        let mut maes = Vec::new();
        for scenario in [Scenario::H0, Scenario::H1, Scenario::H2] {
            let cfg = ExperimentConfig { scenario, eval_generations: 2, ..micro_cfg() };
            let market = cfg.market().unwrap();
            let mirror = SqFactory::from_config(&cfg, market);
            let result = run_evaluation(&cfg, &mirror).unwrap();
            let mean_mae = result.details.iter().map(|d| d.forecast_mae).sum::<f64>()
                / result.details.len() as f64;
            maes.push(mean_mae);
        }
        assert_eq!(maes[0], 0.0, "no noise, no forecast error");
        assert!(maes[0] < maes[1], "H1 noisier than H0: {maes:?}");
        assert!(maes[1] < maes[2], "H2 noisier than H1: {maes:?}");
    }

    #[test]
    fn parallel_and_sequential_evaluation_agree() {
        let cfg = micro_cfg();
        let market = cfg.market().unwrap();
        let model = cfg.copula_model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, P_EVAL_ITEMS, 0, 0));
        let items = generate_items(&model, &cfg.item_gen_config(), 6, &mut rng).unwrap();
        let mirror = SqFactory::from_config(&cfg, market.clone());
        let par = evaluate_generation(&cfg, &market, &items, 0, &mirror, false).unwrap();
        let seq = evaluate_generation_sequential(&cfg, &market, &items, 0, &mirror, false).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn training_runs_deterministically_and_logs_cleanly() {
        let cfg = ExperimentConfig { agent: AgentKind::QrDqn, ..micro_cfg() };
        let run1 = run_training(&cfg, None).unwrap();
        let run2 = run_training(&cfg, None).unwrap();
        assert_eq!(run1.log, run2.log, "identical seeds give identical training");
        assert_eq!(run1.summary, run2.summary);
        assert!(!run1.log.is_empty());
        assert!(run1.log.iter().all(|r| r.loss.is_finite() && r.mean_q_or_mean_lambda.is_finite()));
        let indices: Vec<u64> = run1.log.iter().map(|r| r.update_idx).collect();
        assert!(indices.windows(2).all(|w| w[1] >= w[0]), "update counter is monotone");
        assert_eq!(run1.summary.env_steps, cfg.train_transitions);
        assert!(run1.summary.updates > 0);
        assert!(run1.summary.crossing_checked > 0, "quantile vectors were inspected");
        assert_eq!(run1.summary.optimizer_skips, 0);
        // Exploration decayed along the schedule.
        assert!(run1.summary.final_epsilon < cfg.epsilon_start);
    }

    #[test]
    fn trained_agent_evaluates_and_emits_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { write_trace: true, ..micro_cfg() };
        let run = run_training(&cfg, None).unwrap();
        let result = run_evaluation(&cfg, &run.agent).unwrap();
        assert_eq!(result.generations.len(), cfg.eval_generations);
        emit_results(&cfg, &result, run.agent.name(), dir.path()).unwrap();

        // The CSV parses back into the same rows, and the normalized column
        // is recomputable from the raw columns.
        let mut rdr = csv::Reader::from_path(dir.path().join("results.csv")).unwrap();
        let rows: Vec<GenerationResult> = rdr.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), cfg.eval_generations);
        for (row, orig) in rows.iter().zip(&result.generations) {
            assert_eq!(row.generation, orig.generation);
            assert!((row.agent_profit - orig.agent_profit).abs() < 1e-9);
            let recomputed = 100.0 * row.agent_profit / row.baseline_profit;
            assert!((recomputed - row.norm_profit_pct).abs() < 1e-9);
        }

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["config"]["max_stock"], 16);
        assert_eq!(manifest["config"]["scenario"], "h0");
        assert_eq!(manifest["seeds"]["master"], 42);
        assert!(manifest["config"]["learning_rate"].is_number());
        assert!(dir.path().join("trace_agent.csv").exists());
        assert!(dir.path().join("trace_baseline.csv").exists());
        let trace = std::fs::read_to_string(dir.path().join("trace_agent.csv")).unwrap();
        assert!(trace.starts_with("step,item_id,action,delivered,demanded,sold,missed,wasted,reward,stock_count"));
    }

    #[test]
    fn identical_configs_emit_byte_identical_results() {
        let cfg = micro_cfg();
        let market = cfg.market().unwrap();
        let mirror = SqFactory::from_config(&cfg, market);
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let r1 = run_evaluation(&cfg, &mirror).unwrap();
        let r2 = run_evaluation(&cfg, &mirror).unwrap();
        emit_results(&cfg, &r1, "sq-baseline", dir1.path()).unwrap();
        emit_results(&cfg, &r2, "sq-baseline", dir2.path()).unwrap();
        let a = std::fs::read(dir1.path().join("results.csv")).unwrap();
        let b = std::fs::read(dir2.path().join("results.csv")).unwrap();
        assert_eq!(a, b, "results files are byte-identical");
        let a = std::fs::read(dir1.path().join("manifest.json")).unwrap();
        let b = std::fs::read(dir2.path().join("manifest.json")).unwrap();
        assert_eq!(a, b, "manifests are byte-identical");
    }

    #[test]
    fn audit_is_clean_on_random_policies() {
        let cfg = micro_cfg();
        let report = run_audit(&cfg, 20, 200).unwrap();
        assert_eq!(report.episodes, 20);
        assert_eq!(report.steps, 4000);
        assert!(report.clean(), "audit found problems: {report:?}");
    }

    #[test]
    fn training_log_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train_log.csv");
        let rows = vec![
            TrainLogRow { update_idx: 1, loss: 0.5, epsilon: 0.9, mean_q_or_mean_lambda: 0.1 },
            TrainLogRow { update_idx: 2, loss: 0.4, epsilon: 0.8, mean_q_or_mean_lambda: 0.2 },
        ];
        write_training_log(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("update_idx,loss,epsilon,mean_q_or_mean_lambda"));
        assert_eq!(text.lines().count(), 3);
    }
}
