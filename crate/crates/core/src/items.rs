//! Pseudo-item generation.
//!
//! Store items are described by a handful of correlated attributes: shelf
//! life, base purchase probability, markup, and unit cost. Dependence between
//! the four is modeled with a Clayton copula (lower-tail dependent,
//! exchangeable, Kendall tau = theta / (theta + 2)); each uniform coordinate
//! is then pushed through a configurable marginal. Price is derived as
//! `cost * (1 + markup)` rather than sampled, so it always exceeds cost.
//! Seasonality phases are independent of everything else.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma as GammaSampler};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma, LogNormal};
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ItemError {
    #[error("theta must be strictly positive, got {0}")]
    ThetaNotPositive(f64),
    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),
    #[error("item count must be at least 1")]
    EmptyBatch,
    #[error("max shelf life must be at least 1")]
    ZeroShelfLife,
    #[error("base demand cap must lie in (0, 1], got {0}")]
    BadDemandCap(f64),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid item in row {row}: {reason}")]
    BadRow { row: usize, reason: String },
}

/// One-dimensional marginal used to transform a copula coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Marginal {
    /// Gamma with shape `k` and scale `theta` (mean `k * theta`).
    Gamma { shape: f64, scale: f64 },
    /// Log-normal with the given parameters of the underlying normal.
    LogNormal { mu: f64, sigma: f64 },
}

impl Marginal {
    fn validate(&self) -> Result<(), ItemError> {
        match *self {
            Marginal::Gamma { shape, scale } => {
                if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
                    return Err(ItemError::InvalidMarginal(format!(
                        "gamma shape/scale must be positive finite, got ({shape}, {scale})"
                    )));
                }
            }
            Marginal::LogNormal { mu, sigma } => {
                if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
                    return Err(ItemError::InvalidMarginal(format!(
                        "log-normal sigma must be positive finite, got ({mu}, {sigma})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Inverse CDF at `u` in (0, 1).
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        match *self {
            Marginal::Gamma { shape, scale } => {
                // statrs parameterizes gamma by rate.
                Gamma::new(shape, 1.0 / scale).unwrap().inverse_cdf(u)
            }
            Marginal::LogNormal { mu, sigma } => {
                LogNormal::new(mu, sigma).unwrap().inverse_cdf(u)
            }
        }
    }
}

/// Clayton copula with fixed marginals for the four item attributes, in the
/// order (shelf life, base demand, markup, cost).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaModel {
    theta: f64,
    marginals: [Marginal; 4],
}

impl CopulaModel {
    pub fn new(theta: f64, marginals: [Marginal; 4]) -> Result<Self, ItemError> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(ItemError::ThetaNotPositive(theta));
        }
        for m in &marginals {
            m.validate()?;
        }
        Ok(Self { theta, marginals })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn marginals(&self) -> &[Marginal; 4] {
        &self.marginals
    }

    /// Kendall tau implied by theta: `theta / (theta + 2)`.
    pub fn kendall_tau(&self) -> f64 {
        self.theta / (self.theta + 2.0)
    }
}

impl Default for CopulaModel {
    fn default() -> Self {
        Self {
            theta: 2.0,
            marginals: [
                Marginal::Gamma { shape: 3.0, scale: 3.0 },      // shelf life, days
                Marginal::LogNormal { mu: -3.0, sigma: 0.7 },    // base demand
                Marginal::LogNormal { mu: -0.7, sigma: 0.4 },    // markup
                Marginal::Gamma { shape: 2.0, scale: 2.0 },      // unit cost
            ],
        }
    }
}

/// Discretization and squashing applied on top of the marginals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemGenConfig {
    /// Shelf lives are rounded up and clamped to [1, max_shelf_life].
    pub max_shelf_life: u32,
    /// Base demand draws are capped strictly below this probability.
    pub base_demand_cap: f64,
}

impl Default for ItemGenConfig {
    fn default() -> Self {
        Self { max_shelf_life: 30, base_demand_cap: 0.5 }
    }
}

impl ItemGenConfig {
    pub fn validate(&self) -> Result<(), ItemError> {
        if self.max_shelf_life == 0 {
            return Err(ItemError::ZeroShelfLife);
        }
        if !(self.base_demand_cap > 0.0 && self.base_demand_cap <= 1.0) {
            return Err(ItemError::BadDemandCap(self.base_demand_cap));
        }
        Ok(())
    }
}

/// A generated store item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoItem {
    /// Shelf life at delivery, in days.
    pub shelf_life: u32,
    /// Base purchase probability per customer, before seasonality.
    pub base_demand: f64,
    /// Selling price, strictly greater than cost.
    pub price: f64,
    /// Unit cost.
    pub cost: f64,
    /// Weekly seasonality phase in [0, 2*pi).
    pub phase_weekly: f64,
    /// Yearly seasonality phase in [0, 2*pi).
    pub phase_yearly: f64,
}

impl PseudoItem {
    pub fn margin(&self) -> f64 {
        self.price - self.cost
    }
}

/// Draws `k` points from the Clayton copula via the Marshall-Olkin
/// construction: `V ~ Gamma(1/theta, 1)`, `E_j ~ Exp(1)` iid, and
/// `U_j = (1 + E_j / V)^(-1/theta)`. Every coordinate lies in (0, 1).
pub fn sample_clayton<R: Rng + ?Sized>(model: &CopulaModel, k: usize, rng: &mut R) -> Vec<[f64; 4]> {
    let frailty = GammaSampler::new(1.0 / model.theta, 1.0).expect("validated theta");
    let inv_theta = -1.0 / model.theta;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let v: f64 = frailty.sample(rng);
        let mut u = [0.0f64; 4];
        for slot in u.iter_mut() {
            let e: f64 = Exp1.sample(rng);
            let raw = (1.0 + e / v).powf(inv_theta);
            // Guard against underflow at the open-interval boundary.
            *slot = raw.clamp(1e-12, 1.0 - 1e-12);
        }
        out.push(u);
    }
    out
}

/// Generates `k` items: copula draw, marginal transforms, discretization,
/// and independent uniform phases. Deterministic given the RNG state.
pub fn generate_items<R: Rng + ?Sized>(
    model: &CopulaModel,
    cfg: &ItemGenConfig,
    k: usize,
    rng: &mut R,
) -> Result<Vec<PseudoItem>, ItemError> {
    if k == 0 {
        return Err(ItemError::EmptyBatch);
    }
    cfg.validate()?;
    let mut items = Vec::with_capacity(k);
    let [m_shelf, m_demand, m_markup, m_cost] = model.marginals;
    for u in sample_clayton(model, k, rng) {
        let shelf_life = (m_shelf.inverse_cdf(u[0]).ceil() as u32).clamp(1, cfg.max_shelf_life);
        let base_demand = m_demand
            .inverse_cdf(u[1])
            .min(cfg.base_demand_cap * (1.0 - 1e-9));
        let markup = m_markup.inverse_cdf(u[2]);
        let cost = m_cost.inverse_cdf(u[3]);
        let price = cost * (1.0 + markup);
        let phase_weekly = rng.gen::<f64>() * std::f64::consts::TAU;
        let phase_yearly = rng.gen::<f64>() * std::f64::consts::TAU;
        items.push(PseudoItem { shelf_life, base_demand, price, cost, phase_weekly, phase_yearly });
    }
    Ok(items)
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemRow {
    item_id: usize,
    shelf_life: u32,
    base_demand: f64,
    price: f64,
    cost: f64,
    phase_weekly: f64,
    phase_yearly: f64,
}

/// Writes items as CSV with header
/// `item_id,shelf_life,base_demand,price,cost,phase_weekly,phase_yearly`.
pub fn write_items_csv<W: io::Write>(items: &[PseudoItem], w: W) -> Result<(), ItemError> {
    let mut wtr = csv::Writer::from_writer(w);
    for (item_id, it) in items.iter().enumerate() {
        wtr.serialize(ItemRow {
            item_id,
            shelf_life: it.shelf_life,
            base_demand: it.base_demand,
            price: it.price,
            cost: it.cost,
            phase_weekly: it.phase_weekly,
            phase_yearly: it.phase_yearly,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_items(items: &[PseudoItem], path: &Path) -> Result<(), ItemError> {
    let file = std::fs::File::create(path)?;
    write_items_csv(items, io::BufWriter::new(file))
}

/// Reads items back from the CSV layout produced by [`write_items_csv`],
/// validating the same invariants the generator guarantees.
pub fn read_items_csv<R: io::Read>(r: R) -> Result<Vec<PseudoItem>, ItemError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut items = Vec::new();
    for (row, rec) in rdr.deserialize::<ItemRow>().enumerate() {
        let rec = rec?;
        let it = PseudoItem {
            shelf_life: rec.shelf_life,
            base_demand: rec.base_demand,
            price: rec.price,
            cost: rec.cost,
            phase_weekly: rec.phase_weekly,
            phase_yearly: rec.phase_yearly,
        };
        validate_item(&it).map_err(|reason| ItemError::BadRow { row, reason })?;
        items.push(it);
    }
    if items.is_empty() {
        return Err(ItemError::EmptyBatch);
    }
    Ok(items)
}

pub fn load_items(path: &Path) -> Result<Vec<PseudoItem>, ItemError> {
    let file = std::fs::File::open(path)?;
    read_items_csv(io::BufReader::new(file))
}

fn validate_item(it: &PseudoItem) -> Result<(), String> {
    if it.shelf_life < 1 {
        return Err("shelf life below 1".into());
    }
    if !(it.base_demand > 0.0 && it.base_demand < 1.0) {
        return Err(format!("base demand {} outside (0, 1)", it.base_demand));
    }
    if !(it.cost > 0.0 && it.price > it.cost) {
        return Err(format!("price {} must exceed cost {} > 0", it.price, it.cost));
    }
    if !(0.0..std::f64::consts::TAU).contains(&it.phase_weekly)
        || !(0.0..std::f64::consts::TAU).contains(&it.phase_yearly)
    {
        return Err("phase outside [0, 2*pi)".into());
    }
    Ok(())
}
