//! Generalized Tukey lambda distribution, quantile levels, and the loss
//! functions used by the distributional agents.
//!
//! The distribution is kept in the four-parameter quantile form
//!
//! ```text
//! alpha(u) = lambda1 + (u^lambda3 - (1 - u)^lambda4) / lambda2
//! ```
//!
//! restricted to `lambda2, lambda3, lambda4 > 0`. On that region the quantile
//! function is strictly increasing on (0, 1) (so quantile estimates can never
//! cross) and the mean
//!
//! ```text
//! mean = lambda1 + (1/(1 + lambda3) - 1/(1 + lambda4)) / lambda2
//! ```
//!
//! is finite. There is no density in closed form and none is needed here;
//! sampling is inverse-transform through `alpha`.

use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GldError {
    #[error("lambda2 (scale) must be strictly positive, got {0}")]
    ScaleNotPositive(f64),
    #[error("lambda3 (lower-tail shape) must be strictly positive, got {0}")]
    LowerShapeNotPositive(f64),
    #[error("lambda4 (upper-tail shape) must be strictly positive, got {0}")]
    UpperShapeNotPositive(f64),
    #[error("parameters must be finite, got ({0}, {1}, {2}, {3})")]
    NotFinite(f64, f64, f64, f64),
}

/// Validated parameter vector (lambda1, lambda2, lambda3, lambda4).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GldParams {
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    lambda4: f64,
}

impl GldParams {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64) -> Result<Self, GldError> {
        if !(lambda1.is_finite() && lambda2.is_finite() && lambda3.is_finite() && lambda4.is_finite())
        {
            return Err(GldError::NotFinite(lambda1, lambda2, lambda3, lambda4));
        }
        if lambda2 <= 0.0 {
            return Err(GldError::ScaleNotPositive(lambda2));
        }
        if lambda3 <= 0.0 {
            return Err(GldError::LowerShapeNotPositive(lambda3));
        }
        if lambda4 <= 0.0 {
            return Err(GldError::UpperShapeNotPositive(lambda4));
        }
        Ok(Self { lambda1, lambda2, lambda3, lambda4 })
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn lambda3(&self) -> f64 {
        self.lambda3
    }

    pub fn lambda4(&self) -> f64 {
        self.lambda4
    }

    /// Quantile function at level `u`.
    ///
    /// # Panics
    ///
    /// Panics if `u` is outside the open interval (0, 1).
    pub fn quantile(&self, u: f64) -> f64 {
        assert!(u > 0.0 && u < 1.0, "quantile level {u} outside (0, 1)");
        self.lambda1 + (u.powf(self.lambda3) - (1.0 - u).powf(self.lambda4)) / self.lambda2
    }

    /// Closed-form mean.
    pub fn mean(&self) -> f64 {
        self.lambda1
            + (1.0 / (1.0 + self.lambda3) - 1.0 / (1.0 + self.lambda4)) / self.lambda2
    }

    /// Inverse-transform sample: `quantile(U)` with `U ~ Uniform(0, 1)` open.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        self.quantile(u)
    }

    /// Partial derivatives of `quantile(u)` with respect to
    /// (lambda1, lambda2, lambda3, lambda4), used by the GTDQN backward pass.
    pub fn quantile_grad(&self, u: f64) -> [f64; 4] {
        assert!(u > 0.0 && u < 1.0, "quantile level {u} outside (0, 1)");
        let a = u.powf(self.lambda3);
        let b = (1.0 - u).powf(self.lambda4);
        [
            1.0,
            -(a - b) / (self.lambda2 * self.lambda2),
            a * u.ln() / self.lambda2,
            -b * (1.0 - u).ln() / self.lambda2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantileLevelsError {
    #[error("need at least one level")]
    Empty,
    #[error("level {0} outside (0, 1)")]
    OutOfRange(f64),
    #[error("levels must be strictly increasing at index {0}")]
    NotIncreasing(usize),
}

/// A strictly increasing list of quantile levels in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileLevels {
    levels: Vec<f64>,
}

impl QuantileLevels {
    pub fn new(levels: Vec<f64>) -> Result<Self, QuantileLevelsError> {
        if levels.is_empty() {
            return Err(QuantileLevelsError::Empty);
        }
        for (i, &u) in levels.iter().enumerate() {
            if !(u > 0.0 && u < 1.0) {
                return Err(QuantileLevelsError::OutOfRange(u));
            }
            if i > 0 && levels[i - 1] >= u {
                return Err(QuantileLevelsError::NotIncreasing(i));
            }
        }
        Ok(Self { levels })
    }

    /// The `n` midpoint levels `(2i - 1) / (2n)`, `i = 1..=n`.
    pub fn midpoints(n: usize) -> Self {
        assert!(n >= 1, "need at least one quantile level");
        let levels = (1..=n).map(|i| (2 * i - 1) as f64 / (2 * n) as f64).collect();
        Self { levels }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the exact 0.5 level, if present (true for odd midpoint counts).
    pub fn median_index(&self) -> Option<usize> {
        self.levels.iter().position(|&u| u == 0.5)
    }
}

/// Raw pinball (quantile regression) loss at level `u`.
pub fn pinball_loss(u: f64, y: f64, y_hat: f64) -> f64 {
    (y - y_hat) * u + (y_hat - y).max(0.0)
}

/// Smoothed pinball loss: Huber envelope of the residual multiplied by the
/// raw pinball loss.
///
/// ```text
/// L = 0.5 (y - y_hat)^2 * PL_u(y, y_hat)            if |y - y_hat| <= delta
/// L = delta (|y - y_hat| - delta/2) * PL_u(y, y_hat) otherwise
/// ```
///
/// The two branches agree at |y - y_hat| = delta, so the loss is continuous.
pub fn smoothed_pinball_loss(u: f64, y: f64, y_hat: f64, delta: f64) -> f64 {
    assert!(delta > 0.0, "delta must be positive");
    let pl = pinball_loss(u, y, y_hat);
    let r = y - y_hat;
    if r.abs() <= delta {
        0.5 * r * r * pl
    } else {
        delta * (r.abs() - delta / 2.0) * pl
    }
}

/// Analytic d/d(y_hat) of [`smoothed_pinball_loss`].
pub fn smoothed_pinball_grad(u: f64, y: f64, y_hat: f64, delta: f64) -> f64 {
    let r = y - y_hat;
    let pl = pinball_loss(u, y, y_hat);
    // d(PL)/d(y_hat) = -u + [y_hat > y]
    let dpl = -u + if y_hat > y { 1.0 } else { 0.0 };
    if r.abs() <= delta {
        -r * pl + 0.5 * r * r * dpl
    } else {
        delta * (-r.signum() * pl + (r.abs() - delta / 2.0) * dpl)
    }
}

/// Conventional quantile-Huber loss: asymmetric weight times the Huber
/// envelope of the residual. Selectable as an alternative to
/// [`smoothed_pinball_loss`].
pub fn quantile_huber_loss(u: f64, y: f64, y_hat: f64, delta: f64) -> f64 {
    let r = y - y_hat;
    let w = (u - if r < 0.0 { 1.0 } else { 0.0 }).abs();
    w * huber_loss(r, delta)
}

/// Analytic d/d(y_hat) of [`quantile_huber_loss`].
pub fn quantile_huber_grad(u: f64, y: f64, y_hat: f64, delta: f64) -> f64 {
    let r = y - y_hat;
    let w = (u - if r < 0.0 { 1.0 } else { 0.0 }).abs();
    -w * huber_grad(r, delta)
}

/// Asymmetric squared (expectile) loss at level `u`.
pub fn expectile_loss(u: f64, y: f64, y_hat: f64) -> f64 {
    let w = (u - if y < y_hat { 1.0 } else { 0.0 }).abs();
    w * (y - y_hat) * (y - y_hat)
}

/// Analytic d/d(y_hat) of [`expectile_loss`].
pub fn expectile_grad(u: f64, y: f64, y_hat: f64) -> f64 {
    let w = (u - if y < y_hat { 1.0 } else { 0.0 }).abs();
    -2.0 * w * (y - y_hat)
}

/// Huber loss of a residual.
pub fn huber_loss(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - delta / 2.0)
    }
}

/// Derivative of [`huber_loss`] with respect to `x`.
pub fn huber_grad(x: f64, delta: f64) -> f64 {
    x.clamp(-delta, delta)
}

/// Outcome of a finite-difference check of an analytic derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradCheck {
    /// The point sits on (or within `10h` of) a non-differentiable seam.
    Skipped,
    /// Absolute deviation between the analytic and central-difference value.
    Deviation(f64),
}

/// Compares the analytic smoothed-pinball derivative against a central finite
/// difference with step `h`. Points near the loss seams (zero residual or the
/// Huber boundary) are reported as skipped instead of checked.
pub fn gradient_check(u: f64, y: f64, y_hat: f64, delta: f64, h: f64) -> GradCheck {
    let r = y - y_hat;
    if r.abs() <= 10.0 * h || (r.abs() - delta).abs() <= 10.0 * h {
        return GradCheck::Skipped;
    }
    let fd = (smoothed_pinball_loss(u, y, y_hat + h, delta)
        - smoothed_pinball_loss(u, y, y_hat - h, delta))
        / (2.0 * h);
    GradCheck::Deviation((smoothed_pinball_grad(u, y, y_hat, delta) - fd).abs())
}
