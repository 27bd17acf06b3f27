//! Reward models the bandit scores arms with: a GP posterior (the
//! non-parametric default) and a ridge-regularized linear model (matching the
//! linear-reward assumption E[r|c] = cᵀθ*, and cheap enough for long
//! property-test runs).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::surrogate::{gp_fit, gp_posterior, GpModel, Kernel};

use super::features::ContextVector;

/// Posterior reward estimate over contexts, refit from the full history.
pub trait RewardModel {
    /// Predictive (mean, variance) of the reward at a context.
    fn predict(&self, context: &ContextVector) -> (f64, f64);

    /// Refits on the complete observation history.
    fn refit(&mut self, contexts: &[ContextVector], rewards: &[f64]) -> Result<()>;
}

/// GP reward surrogate; every refit is a full O(n³) fit by design.
///
/// The GP is fit on rewards centered at their sample mean, so a context far
/// from all observations predicts the average observed reward rather than
/// zero — novelty widens the variance but does not masquerade as a penalty.
#[derive(Debug, Clone)]
pub struct GpReward {
    kernel: Kernel,
    model: GpModel,
    target_mean: f64,
}

impl GpReward {
    pub fn new(kernel: Kernel) -> Result<Self> {
        Ok(Self {
            kernel,
            model: GpModel::prior(kernel)?,
            target_mean: 0.0,
        })
    }

    pub fn model(&self) -> &GpModel {
        &self.model
    }
}

impl RewardModel for GpReward {
    fn predict(&self, context: &ContextVector) -> (f64, f64) {
        let (mean, variance) = gp_posterior(&self.model, context.values());
        (self.target_mean + mean, variance)
    }

    fn refit(&mut self, contexts: &[ContextVector], rewards: &[f64]) -> Result<()> {
        let inputs: Vec<DVector<f64>> = contexts.iter().map(|c| c.values().clone()).collect();
        self.target_mean = if rewards.is_empty() {
            0.0
        } else {
            rewards.iter().sum::<f64>() / rewards.len() as f64
        };
        let centered: Vec<f64> = rewards.iter().map(|r| r - self.target_mean).collect();
        self.model = gp_fit(&inputs, &centered, self.kernel)?;
        Ok(())
    }
}

/// Ridge-regularized linear reward model: θ = (XᵀX + λI)⁻¹Xᵀr, predictive
/// variance σ_r²·cᵀ(XᵀX + λI)⁻¹c where σ_r² is the reward noise scale.
#[derive(Debug, Clone)]
pub struct RidgeReward {
    lambda: f64,
    noise_variance: f64,
    theta: DVector<f64>,
    a_inv: DMatrix<f64>,
}

impl RidgeReward {
    /// Unit reward-noise scale — the conservative default when the noise is
    /// unknown.
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        Self::with_noise(dim, lambda, 1.0)
    }

    /// Sets the reward noise variance the predictive width is scaled by;
    /// with nearly noiseless rewards a small value stops the exploration
    /// bonus from dominating long after the coefficients have converged.
    pub fn with_noise(dim: usize, lambda: f64, noise_variance: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!(
                "ridge regularizer {lambda} must be a positive finite number"
            )));
        }
        if !(noise_variance > 0.0) || !noise_variance.is_finite() {
            return Err(Error::Config(format!(
                "reward noise variance {noise_variance} must be a positive finite number"
            )));
        }
        Ok(Self {
            lambda,
            noise_variance,
            theta: DVector::zeros(dim),
            a_inv: DMatrix::identity(dim, dim) / lambda,
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }
}

impl RewardModel for RidgeReward {
    fn predict(&self, context: &ContextVector) -> (f64, f64) {
        let c = context.values();
        let mean = c.dot(&self.theta);
        let width = (c.transpose() * &self.a_inv * c)[(0, 0)].max(0.0);
        (mean, self.noise_variance * width)
    }

    fn refit(&mut self, contexts: &[ContextVector], rewards: &[f64]) -> Result<()> {
        if contexts.len() != rewards.len() {
            return Err(Error::Dimension(format!(
                "{} contexts but {} rewards",
                contexts.len(),
                rewards.len()
            )));
        }
        let dim = self.theta.len();
        let mut a = DMatrix::identity(dim, dim) * self.lambda;
        let mut b = DVector::zeros(dim);
        for (ctx, r) in contexts.iter().zip(rewards) {
            let c = ctx.values();
            if c.len() != dim {
                return Err(Error::Dimension(format!(
                    "context dim {} vs model dim {dim}",
                    c.len()
                )));
            }
            a += c * c.transpose();
            b += c * *r;
        }
        let a_inv = a.try_inverse().ok_or_else(|| {
            Error::Numerical("ridge design matrix is not invertible".into())
        })?;
        self.theta = &a_inv * b;
        self.a_inv = a_inv;
        Ok(())
    }
}
