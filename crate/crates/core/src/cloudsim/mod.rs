//! Discrete-time simulated container cluster: workload generation, fluid
//! queueing with Erlang-C latency, actuation-delayed scaling, and the full
//! closed loop for every autoscaler variant.

mod cluster;
mod scenario;
mod workload;

pub use cluster::{
    step, threshold_autoscaler, threshold_rule, ClusterState, LatencyModel, ScalingAction,
    TickMetrics, MEM_BASE_MIB, MEM_PER_THROUGHPUT_MIB, RHO_CLAMP,
};
pub use scenario::{
    round_reward, run_scenario, ExperimentResult, ScalerKind, ScenarioConfig,
    LATENCY_HALF_PENALTY, LATENCY_WEIGHT, MILLIPOD, POD_COST_WEIGHT,
};
pub use workload::{generate_workload, FlashCrowd, WorkloadSpec};
