//! Attention-augmented Kalman filtering for container autoscaling.
//!
//! The crate provides the full loop: a measurement pipeline
//! ([`estimator`]) that denoises telemetry with PCA + self-attention before an
//! EKF; an LSTM that learns the filter's noise covariances ([`ksurfnet`]); a
//! Gaussian-process reward surrogate ([`surrogate`]); a contextual bandit
//! autoscaler with regret accounting ([`bandit`]); a discrete-time cluster
//! simulator ([`cloudsim`]); and summary statistics ([`stats`]).

pub mod bandit;
pub mod checkpoint;
pub mod cloudsim;
pub mod error;
pub mod estimator;
pub mod ksurfnet;
pub mod optim;
pub mod stats;
pub mod surrogate;
pub mod trace;

pub use cloudsim::{run_scenario, ExperimentResult, LatencyModel, ScalerKind, ScenarioConfig, WorkloadSpec};
pub use error::{Error, Result};
pub use estimator::{
    AttentionConfig, AttentionNetwork, KsurfEstimator, MeasurementWindow, PcaBasis, StateEstimate,
    SystemModel,
};
pub use ksurfnet::{LstmConfig, NoiseEstimate, TrainOutcome};
pub use trace::Trace;
