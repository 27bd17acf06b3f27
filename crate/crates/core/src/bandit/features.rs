//! Context feature map: per-dimension running standardization, scaled so
//! three standard deviations sit inside the unit ball, then clipped onto the
//! ball. Every context handed to the bandit satisfies ‖c‖ ≤ 1 regardless of
//! the scale of the underlying telemetry, and typical (sub-3σ) inputs keep
//! their geometry — only outliers are flattened onto the boundary.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a context vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextSource {
    /// ψ(z_t): the raw observation.
    RawObservation,
    /// ψ(x̂_t): the filter posterior with fixed noise configuration.
    Ekf,
    /// ψ(x̂_t): the filter posterior with learned noise covariances.
    LEkf,
    /// Surrogate-model state (no filtering).
    GpState,
}

/// Bounded feature vector for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    c: DVector<f64>,
    source: ContextSource,
}

impl ContextVector {
    /// Builds a context, projecting onto the unit ball when ‖c‖ > 1.
    /// Non-finite components are rejected.
    pub fn new(c: DVector<f64>, source: ContextSource) -> Result<Self> {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("context vector is not finite".into()));
        }
        let norm = c.norm();
        let c = if norm > 1.0 { c / norm } else { c };
        Ok(Self { c, source })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn source(&self) -> ContextSource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }
}

/// Standard deviations mapped onto the unit-ball radius: a standardized
/// context is divided by this, so anything within ±3σ per dimension stays
/// inside the ball undistorted.
pub const CONTEXT_SIGMA_RADIUS: f64 = 3.0;

/// Running per-dimension moments (Welford) feeding the standardization.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    count: u64,
    mean: DVector<f64>,
    m2: DVector<f64>,
}

impl FeatureMap {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            m2: DVector::zeros(dim),
        }
    }

    /// Warm-starts the running statistics, e.g. when replaying a recorded
    /// stream. `count` must be ≥ 2 for the standard deviations to be used.
    pub fn from_moments(mean: DVector<f64>, std: DVector<f64>, count: u64) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Dimension(format!(
                "mean dim {} vs std dim {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(Error::Config("standard deviations must be nonnegative".into()));
        }
        let denom = count.saturating_sub(1) as f64;
        let m2 = std.map(|s| s * s * denom);
        Ok(Self { count, mean, m2 })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Folds one observation into the running moments.
    pub fn push(&mut self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "observation dim {} vs feature map dim {}",
                x.len(),
                self.mean.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation is not finite".into()));
        }
        self.count += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = x - &self.mean;
        self.m2 += delta.component_mul(&delta2);
        Ok(())
    }

    /// Sample standard deviation per dimension; zero until two observations.
    pub fn std(&self) -> DVector<f64> {
        if self.count < 2 {
            return DVector::zeros(self.mean.len());
        }
        self.m2.map(|v| (v / (self.count - 1) as f64).sqrt())
    }

    /// ψ(x): center and scale each dimension by the running moments (a
    /// zero-variance dimension is centered only), shrink by
    /// [`CONTEXT_SIGMA_RADIUS`], and clip the result onto the unit ball.
    pub fn map(&self, x: &DVector<f64>, source: ContextSource) -> Result<ContextVector> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "input dim {} vs feature map dim {}",
                x.len(),
                self.mean.len()
            )));
        }
        let std = self.std();
        let standardized = DVector::from_fn(x.len(), |i, _| {
            let centered = x[i] - self.mean[i];
            if std[i] > 0.0 {
                centered / std[i]
            } else {
                centered
            }
        });
        ContextVector::new(standardized / CONTEXT_SIGMA_RADIUS, source)
    }
}
