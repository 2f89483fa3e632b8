//! Market dynamics: seasonal purchase probabilities, correlated customer
//! arrivals, binomial demand realization, and noisy week-ahead forecasts.
//!
//! Time is discretized into days, each split into `tau` sub-periods. The
//! purchase probability of an item on day `t` is
//!
//! ```text
//! p(t) = clamp(b * cos(omega_w t + phi_w) * cos(omega_y t + phi_y), 0, 1)
//! ```
//!
//! so roughly half of all days see zero demand for a given item, and peaks
//! recur on weekly and yearly cycles. Customer counts for the day's
//! sub-periods come from one draw of a correlated Gaussian vector (rounded,
//! clamped at zero); negative off-diagonal covariance captures shoppers who
//! come early *or* late, not both. Realized demand in a sub-period is
//! binomial in the customer count.

use crate::items::PseudoItem;
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("need at least one sub-period")]
    NoSubPeriods,
    #[error("mean vector and covariance dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("covariance is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("off-diagonal covariance must be non-positive at ({0}, {1})")]
    PositiveOffDiagonal(usize, usize),
    #[error("covariance is not positive semi-definite (pivot {0} at index {1})")]
    NotPsd(f64, usize),
    #[error("angular frequency must be positive and finite")]
    BadFrequency,
    #[error("forecast noise sigma must be non-negative and finite, got {0}")]
    BadSigma(f64),
    #[error("forecast horizon must be at least 1 day")]
    ZeroHorizon,
    #[error("customer means must be non-negative and finite")]
    BadMean,
}

/// Angular frequencies of the two seasonal cycles and the intra-day grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeasonalityConfig {
    pub omega_weekly: f64,
    pub omega_yearly: f64,
    pub sub_periods_per_day: usize,
}

impl Default for SeasonalityConfig {
    fn default() -> Self {
        Self {
            omega_weekly: std::f64::consts::TAU / 7.0,
            omega_yearly: std::f64::consts::TAU / 365.0,
            sub_periods_per_day: 4,
        }
    }
}

impl SeasonalityConfig {
    pub fn validate(&self) -> Result<(), MarketError> {
        if self.sub_periods_per_day == 0 {
            return Err(MarketError::NoSubPeriods);
        }
        if !(self.omega_weekly > 0.0 && self.omega_weekly.is_finite())
            || !(self.omega_yearly > 0.0 && self.omega_yearly.is_finite())
        {
            return Err(MarketError::BadFrequency);
        }
        Ok(())
    }
}

/// Purchase probability of `item` on day `t`, clamped into [0, 1].
pub fn purchase_probability(item: &PseudoItem, t: u64, cfg: &SeasonalityConfig) -> f64 {
    let t = t as f64;
    let raw = item.base_demand
        * (cfg.omega_weekly * t + item.phase_weekly).cos()
        * (cfg.omega_yearly * t + item.phase_yearly).cos();
    raw.clamp(0.0, 1.0)
}

/// Correlated Gaussian model of per-sub-period customer counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerModel {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    /// Lower-triangular factor with L L^T = covariance, zero rows where the
    /// matrix is semi-definite.
    chol: Vec<Vec<f64>>,
}

impl CustomerModel {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self, MarketError> {
        let n = mean.len();
        if n == 0 {
            return Err(MarketError::NoSubPeriods);
        }
        if mean.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(MarketError::BadMean);
        }
        if covariance.len() != n || covariance.iter().any(|row| row.len() != n) {
            return Err(MarketError::DimensionMismatch(n, covariance.len()));
        }
        let scale = covariance
            .iter()
            .enumerate()
            .map(|(i, row)| row[i].abs())
            .fold(0.0f64, f64::max)
            .max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (covariance[i][j] - covariance[j][i]).abs() > 1e-9 * scale {
                    return Err(MarketError::NotSymmetric(i, j));
                }
                if covariance[i][j] > 0.0 {
                    return Err(MarketError::PositiveOffDiagonal(i, j));
                }
            }
        }
        let chol = cholesky_semidefinite(&covariance, 1e-10 * scale)?;
        Ok(Self { mean, covariance, chol })
    }

    /// Builds the covariance from per-sub-period standard deviations and one
    /// shared pairwise correlation (which must keep the matrix PSD; for `n`
    /// sub-periods that requires `rho > -1/(n-1)`).
    pub fn from_correlation(mean: Vec<f64>, stds: Vec<f64>, rho: f64) -> Result<Self, MarketError> {
        let n = mean.len();
        if stds.len() != n {
            return Err(MarketError::DimensionMismatch(n, stds.len()));
        }
        let mut cov = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                cov[i][j] = if i == j { stds[i] * stds[i] } else { rho * stds[i] * stds[j] };
            }
        }
        Self::new(mean, cov)
    }

    pub fn sub_periods(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[Vec<f64>] {
        &self.covariance
    }

    /// Expected customers over a whole day.
    pub fn total_mean(&self) -> f64 {
        self.mean.iter().sum()
    }

    /// One day's worth of arrivals: a single multivariate Gaussian draw,
    /// rounded to the nearest integer and clamped at zero per sub-period.
    pub fn sample_day<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u64> {
        let n = self.mean.len();
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        (0..n)
            .map(|i| {
                let mut x = self.mean[i];
                for (j, zj) in z.iter().enumerate().take(i + 1) {
                    x += self.chol[i][j] * zj;
                }
                x.round().max(0.0) as u64
            })
            .collect()
    }

    /// Arrivals for one sub-period of a fresh day draw.
    pub fn arrivals<R: Rng + ?Sized>(&self, sub_period: usize, rng: &mut R) -> u64 {
        assert!(sub_period < self.mean.len(), "sub-period {sub_period} out of range");
        self.sample_day(rng)[sub_period]
    }
}

impl Default for CustomerModel {
    fn default() -> Self {
        let mean = vec![45.0, 25.0, 20.0, 30.0];
        let stds: Vec<f64> = mean.iter().map(|m| m / 5.0).collect();
        Self::from_correlation(mean, stds, -0.3).expect("default covariance is PSD")
    }
}

/// Lower-triangular Cholesky that tolerates semi-definite input: a pivot
/// within `tol` of zero zeroes out its column instead of failing.
fn cholesky_semidefinite(a: &[Vec<f64>], tol: f64) -> Result<Vec<Vec<f64>>, MarketError> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if d > tol {
            l[j][j] = d.sqrt();
            for i in j + 1..n {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                l[i][j] = s / l[j][j];
            }
        } else if d >= -tol {
            // Semi-definite direction: leave the column at zero.
        } else {
            return Err(MarketError::NotPsd(d, j));
        }
    }
    Ok(l)
}

/// Realized demand: `Binomial(n, p)` customers buying one unit each.
pub fn realize_demand<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    assert!((0.0..=1.0).contains(&p), "purchase probability {p} outside [0, 1]");
    if n == 0 || p == 0.0 {
        return 0;
    }
    Binomial::new(n, p).expect("validated n, p").sample(rng)
}

/// Forecast noise level and horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Standard deviation of the per-item daily noise draw.
    pub sigma: f64,
    /// Days ahead covered by the forecast.
    pub horizon_days: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { sigma: 0.0, horizon_days: 7 }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<(), MarketError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(MarketError::BadSigma(self.sigma));
        }
        if self.horizon_days == 0 {
            return Err(MarketError::ZeroHorizon);
        }
        Ok(())
    }
}

/// Forecast purchase probability `delta_t` days ahead of day `t`:
/// the true probability plus noise growing linearly with the horizon,
/// clamped back into [0, 1]. `eps` is the item's current daily noise draw.
pub fn forecast_probability(
    item: &PseudoItem,
    t: u64,
    delta_t: u32,
    eps: f64,
    season: &SeasonalityConfig,
    fc: &ForecastConfig,
) -> f64 {
    assert!(
        delta_t >= 1 && delta_t as usize <= fc.horizon_days,
        "delta_t {delta_t} outside 1..={}",
        fc.horizon_days
    );
    let p = purchase_probability(item, t + delta_t as u64, season);
    (p + delta_t as f64 * eps).clamp(0.0, 1.0)
}

/// The deterministic part of the customer forecast: the model's mean vector.
pub fn forecast_customers(model: &CustomerModel) -> &[f64] {
    model.mean()
}

/// Market bundle: everything item-independent about demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Market {
    pub seasonality: SeasonalityConfig,
    pub customers: CustomerModel,
    pub forecast: ForecastConfig,
}

impl Market {
    pub fn new(
        seasonality: SeasonalityConfig,
        customers: CustomerModel,
        forecast: ForecastConfig,
    ) -> Result<Self, MarketError> {
        seasonality.validate()?;
        forecast.validate()?;
        if customers.sub_periods() != seasonality.sub_periods_per_day {
            return Err(MarketError::DimensionMismatch(
                seasonality.sub_periods_per_day,
                customers.sub_periods(),
            ));
        }
        Ok(Self { seasonality, customers, forecast })
    }

    /// Expected units sold on day `t + delta_t` under the current noise draw:
    /// total expected customers times the forecast purchase probability.
    pub fn expected_units(&self, item: &PseudoItem, t: u64, delta_t: u32, eps: f64) -> f64 {
        self.customers.total_mean()
            * forecast_probability(item, t, delta_t, eps, &self.seasonality, &self.forecast)
    }
}

impl Default for Market {
    fn default() -> Self {
        Self {
            seasonality: SeasonalityConfig::default(),
            customers: CustomerModel::default(),
            forecast: ForecastConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_item(base_demand: f64, phase_weekly: f64, phase_yearly: f64) -> PseudoItem {
        PseudoItem {
            shelf_life: 5,
            base_demand,
            price: 6.0,
            cost: 4.0,
            phase_weekly,
            phase_yearly,
        }
    }

    #[test]
    fn purchase_probability_bounds_and_phases() {
        let cfg = SeasonalityConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5000 {
            use rand::Rng;
            let item = test_item(
                rng.gen_range(1e-4..0.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let t = rng.gen_range(0..10_000u64);
            let p = purchase_probability(&item, t, &cfg);
            assert!((0.0..=1.0).contains(&p));
            assert!(p <= item.base_demand + 1e-15);
        }
        // Aligned phases at t = 0 give exactly the base probability.
        let item = test_item(0.3, 0.0, 0.0);
        assert!((purchase_probability(&item, 0, &cfg) - 0.3).abs() < 1e-15);
        // A phase of pi makes the weekly cosine negative: clamped to zero.
        let item = test_item(0.3, std::f64::consts::PI, 0.0);
        assert_eq!(purchase_probability(&item, 0, &cfg), 0.0);
    }

    #[test]
    fn purchase_probability_has_weekly_period() {
        // With the yearly frequency zeroed out... it cannot be zero, so use a
        // tiny yearly frequency and compare one week apart.
        let cfg = SeasonalityConfig {
            omega_weekly: std::f64::consts::TAU / 7.0,
            omega_yearly: 1e-12,
            sub_periods_per_day: 4,
        };
        let item = test_item(0.4, 1.0, 2.0);
        for t in 0..50u64 {
            let a = purchase_probability(&item, t, &cfg);
            let b = purchase_probability(&item, t + 7, &cfg);
            assert!((a - b).abs() < 1e-9, "t={t}: {a} vs {b}");
        }
    }

    #[test]
    fn customer_model_validation() {
        // Positive off-diagonal rejected.
        let cov = vec![vec![1.0, 0.5], vec![0.5, 1.0]];
        assert!(matches!(
            CustomerModel::new(vec![10.0, 10.0], cov),
            Err(MarketError::PositiveOffDiagonal(1, 0))
        ));
        // Asymmetric rejected.
        let cov = vec![vec![1.0, -0.5], vec![-0.2, 1.0]];
        assert!(matches!(
            CustomerModel::new(vec![10.0, 10.0], cov),
            Err(MarketError::NotSymmetric(1, 0))
        ));
        // Indefinite rejected: correlation -0.6 for 3 dims needs rho > -0.5.
        assert!(matches!(
            CustomerModel::from_correlation(vec![10.0; 3], vec![1.0; 3], -0.6),
            Err(MarketError::NotPsd(..))
        ));
        // The default model is valid and has negative off-diagonals.
        let m = CustomerModel::default();
        assert!(m.covariance()[0][1] < 0.0);
    }

    #[test]
    fn zero_covariance_returns_the_mean() {
        let m = CustomerModel::new(vec![50.0, 25.0], vec![vec![0.0; 2]; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            assert_eq!(m.sample_day(&mut rng), vec![50, 25]);
        }
    }

    #[test]
    fn sample_day_matches_means_and_negative_correlation() {
        let m = CustomerModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 20_000;
        let draws: Vec<Vec<u64>> = (0..n).map(|_| m.sample_day(&mut rng)).collect();
        for (i, &mu) in m.mean().iter().enumerate() {
            let avg: f64 = draws.iter().map(|d| d[i] as f64).sum::<f64>() / n as f64;
            let sd = (m.covariance()[i][i]).sqrt();
            let tol = 4.0 * sd / (n as f64).sqrt() + 0.05;
            assert!((avg - mu).abs() < tol, "sub-period {i}: {avg} vs {mu}");
        }
        // Empirical correlation of the first two coordinates is negative.
        let xs: Vec<f64> = draws.iter().map(|d| d[0] as f64).collect();
        let ys: Vec<f64> = draws.iter().map(|d| d[1] as f64).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov: f64 =
            xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n as f64;
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n as f64;
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n as f64;
        let corr = cov / (vx * vy).sqrt();
        assert!(corr < -0.2, "correlation {corr} not negative enough");
        // Counts are never negative by construction (u64), and not all equal.
        assert!(draws.iter().any(|d| d != &draws[0]));
    }

    #[test]
    fn arrivals_picks_one_coordinate() {
        let m = CustomerModel::new(vec![50.0, 25.0], vec![vec![0.0; 2]; 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        assert_eq!(m.arrivals(0, &mut rng), 50);
        assert_eq!(m.arrivals(1, &mut rng), 25);
    }

    #[test]
    fn realized_demand_is_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let n = 10_000;
        let mut total = 0u64;
        for _ in 0..n {
            let d = realize_demand(1000, 0.1, &mut rng);
            assert!(d <= 1000);
            total += d;
        }
        let mean = total as f64 / n as f64;
        // Var = 1000 * 0.1 * 0.9 = 90; three standard errors of the mean.
        let tol = 3.0 * (90.0f64 / n as f64).sqrt();
        assert!((mean - 100.0).abs() < tol, "mean {mean}");
        assert_eq!(realize_demand(0, 0.5, &mut rng), 0);
        assert_eq!(realize_demand(100, 0.0, &mut rng), 0);
        assert_eq!(realize_demand(100, 1.0, &mut rng), 100);
    }

    #[test]
    fn forecast_reduces_to_truth_without_noise() {
        let season = SeasonalityConfig::default();
        let fc = ForecastConfig::default();
        let item = test_item(0.3, 1.0, 2.0);
        for t in 0..20u64 {
            for dt in 1..=7u32 {
                let f = forecast_probability(&item, t, dt, 0.0, &season, &fc);
                let p = purchase_probability(&item, t + dt as u64, &season);
                assert_eq!(f, p);
            }
        }
    }

    #[test]
    fn forecast_noise_grows_with_horizon_and_clamps() {
        let season = SeasonalityConfig::default();
        let fc = ForecastConfig { sigma: 0.05, horizon_days: 7 };
        let item = test_item(0.3, 0.0, 0.0);
        let eps = 0.04;
        for dt in 1..=7u32 {
            let f = forecast_probability(&item, 0, dt, eps, &season, &fc);
            let p = purchase_probability(&item, dt as u64, &season);
            assert!((f - (p + dt as f64 * eps).clamp(0.0, 1.0)).abs() < 1e-15);
            assert!((0.0..=1.0).contains(&f));
        }
        // Large negative noise clamps at zero.
        let f = forecast_probability(&item, 0, 7, -1.0, &season, &fc);
        assert_eq!(f, 0.0);
    }

    #[test]
    fn market_bundle_validation() {
        let bad = Market::new(
            SeasonalityConfig { sub_periods_per_day: 3, ..Default::default() },
            CustomerModel::default(),
            ForecastConfig::default(),
        );
        assert!(matches!(bad, Err(MarketError::DimensionMismatch(3, 4))));
        let m = Market::default();
        assert_eq!(m.customers.sub_periods(), m.seasonality.sub_periods_per_day);
        assert_eq!(m.customers.total_mean(), 120.0);
    }
}
