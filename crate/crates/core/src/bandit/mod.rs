//! Contextual multi-armed bandit for scaling decisions: bounded feature
//! contexts, pluggable reward models (GP or ridge linear), UCB selection,
//! regret and variance-reduction (ρ) accounting, and the ρ_min heuristic
//! that switches between fixed-noise and learned-noise filter contexts.

mod engine;
mod features;
mod reward;

pub use engine::{
    regret_bound_check, rho, select_action, select_context, ucb_beta, ArmSet, BoundReport,
    ContextualBandit, FilterNoise, RegretRecord, RegretTrace, RewardSample, RHO_MIN_DEFAULT,
};
pub use features::{ContextSource, ContextVector, FeatureMap, CONTEXT_SIGMA_RADIUS};
pub use reward::{GpReward, RewardModel, RidgeReward};
