//! Cluster dynamics: one discrete tick of scaling, fluid queueing, and the
//! latency/CPU/memory observables.
//!
//! Requests are fluid: each tick the cluster serves
//! `min(queue + arrivals, pods·μ)` and carries the remainder. Per-request
//! latency is base plus a queueing delay — time to drain the standing
//! backlog plus the Erlang-C expected wait at the smoothed demand rate —
//! plus Gaussian noise. Feeding the wait term the service-time-scale demand
//! average rather than single-tick bursts keeps one lumpy arrival from
//! reading as a saturated queue. The demand is clamped below saturation
//! ([`RHO_CLAMP`]) and the total delay is capped at
//! `lipschitz_l·base_latency`, which bounds every per-unit change in
//! (pods, load) and so keeps latency Lipschitz with a constant controlled by
//! the model; away from the cap it is monotone non-increasing in pod count.

use rand::prelude::*;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Offered load is clamped to this fraction of capacity inside the waiting
/// approximation, keeping the Erlang-C term finite.
pub const RHO_CLAMP: f64 = 0.98;

/// Idle per-pod memory footprint.
pub const MEM_BASE_MIB: f64 = 16.0;

/// Memory added per unit of per-pod throughput (requests per tick).
pub const MEM_PER_THROUGHPUT_MIB: f64 = 240.0;

/// Instantaneous cluster state carried between ticks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterState {
    /// Active worker pods.
    pub pods: u32,
    /// Inclusive (min, max) pod bounds; every action is clamped into them.
    pub pod_bounds: (u32, u32),
    /// Mean per-pod CPU utilization of the last tick, in [0, 1].
    pub per_pod_cpu: f64,
    /// Mean per-pod memory of the last tick, MiB.
    pub per_pod_mem: f64,
    /// Requests waiting to be served.
    pub queue_len: f64,
    /// Arrival rate smoothed over roughly one service time; the waiting-time
    /// approximation runs on this, not on single-tick bursts.
    pub demand_rate: f64,
    /// Time index.
    pub tick: u64,
}

impl ClusterState {
    /// Fresh idle cluster at `pods` workers.
    pub fn new(pods: u32, pod_bounds: (u32, u32)) -> Result<Self> {
        let (lo, hi) = pod_bounds;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "pod bounds ({lo}, {hi}) need 1 ≤ min ≤ max"
            )));
        }
        if pods < lo || pods > hi {
            return Err(Error::Config(format!(
                "initial pods {pods} outside bounds ({lo}, {hi})"
            )));
        }
        Ok(Self {
            pods,
            pod_bounds,
            per_pod_cpu: 0.0,
            per_pod_mem: MEM_BASE_MIB,
            queue_len: 0.0,
            demand_rate: 0.0,
            tick: 0,
        })
    }
}

/// An absolute pod-count target; clamped to the cluster's bounds when
/// applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalingAction {
    pub target_pods: u32,
}

/// Service-time model shared by every scenario.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatencyModel {
    /// μ: requests one pod serves per tick.
    pub service_rate: f64,
    /// Latency floor of an unqueued request.
    pub base_latency: f64,
    /// Slope budget; also caps the queueing delay at
    /// `lipschitz_l·base_latency`.
    pub lipschitz_l: f64,
    /// Gaussian noise on every latency sample.
    pub noise_std: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        // Scales cohere in ticks: one pod serves 0.05 requests/tick, so
        // queueing delays land in the 0–10 tick range the cap allows, on a
        // one-tick floor.
        Self {
            service_rate: 0.05,
            base_latency: 1.0,
            lipschitz_l: 10.0,
            noise_std: 0.05,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        if self.service_rate <= 0.0 || !self.service_rate.is_finite() {
            return Err(Error::Config(format!(
                "service rate {} must be positive",
                self.service_rate
            )));
        }
        if self.lipschitz_l <= 0.0 || !self.lipschitz_l.is_finite() {
            return Err(Error::Config(format!(
                "lipschitz constant {} must be positive",
                self.lipschitz_l
            )));
        }
        if self.base_latency <= 0.0 || !self.base_latency.is_finite() {
            return Err(Error::Config(format!(
                "base latency {} must be positive",
                self.base_latency
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config(format!(
                "latency noise {} must be nonnegative",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// One tick's observables, in the order of the metrics CSV
/// `tick,pods,cpu,mem,queue,latency`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickMetrics {
    pub tick: u64,
    pub pods: u32,
    pub cpu: f64,
    pub mem: f64,
    pub queue: f64,
    pub latency: f64,
}

/// Erlang-C expected waiting time for an M/M/c queue: `c` servers, arrival
/// rate `lambda`, per-server rate `mu`. Uses the Erlang-B recursion, which is
/// stable for any load; the caller keeps `lambda < c·mu`.
fn erlang_c_wait(c: u32, lambda: f64, mu: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let a = lambda / mu;
    let mut b = 1.0;
    for k in 1..=c {
        b = a * b / (k as f64 + a * b);
    }
    let rho = a / c as f64;
    let waiting_probability = b / (1.0 - rho * (1.0 - b));
    waiting_probability / (c as f64 * mu - lambda)
}

/// Advances the cluster one tick: applies the (clamped) scaling action,
/// serves what capacity allows, carries the rest, and samples the tick's
/// latency. Conservation is exact: `queue + arrivals = served + new queue`.
pub fn step<R: Rng>(
    state: &ClusterState,
    action: ScalingAction,
    arrivals: f64,
    lm: &LatencyModel,
    rng: &mut R,
) -> (ClusterState, TickMetrics) {
    let (lo, hi) = state.pod_bounds;
    let pods = action.target_pods.clamp(lo, hi);
    let capacity = pods as f64 * lm.service_rate;
    let backlog = state.queue_len;
    let available = backlog + arrivals;
    let served = available.min(capacity);
    let queue = available - served;
    let cpu = if capacity > 0.0 { served / capacity } else { 0.0 };

    // Smooth arrivals over ~one service time: fast services forget bursts
    // almost immediately, slow ones feel them for the whole service window.
    let alpha = lm.service_rate / (1.0 + lm.service_rate);
    let demand_rate = (1.0 - alpha) * state.demand_rate + alpha * arrivals;

    let offered = demand_rate.min(RHO_CLAMP * capacity);
    let wait = erlang_c_wait(pods, offered, lm.service_rate);
    let drain = backlog / capacity;
    let delay = (wait + drain).min(lm.lipschitz_l * lm.base_latency);
    let noise: f64 = lm.noise_std * rng.sample::<f64, _>(StandardNormal);
    let latency = (lm.base_latency + delay + noise).max(0.0);
    let mem = MEM_BASE_MIB + MEM_PER_THROUGHPUT_MIB * served / pods as f64;

    let next = ClusterState {
        pods,
        pod_bounds: state.pod_bounds,
        per_pod_cpu: cpu,
        per_pod_mem: mem,
        queue_len: queue,
        demand_rate,
        tick: state.tick + 1,
    };
    let metrics = TickMetrics {
        tick: state.tick,
        pods,
        cpu,
        mem,
        queue,
        latency,
    };
    (next, metrics)
}

/// The threshold-crossing scaling rule on an explicit utilization signal:
/// up by `step_size` above `threshold`, down below `threshold/2`, hold in
/// between. The KF baseline feeds this the filtered utilization instead of
/// the raw reading.
pub fn threshold_rule(
    utilization: f64,
    pods: u32,
    threshold: f64,
    step_size: u32,
) -> ScalingAction {
    let target_pods = if utilization > threshold {
        pods.saturating_add(step_size)
    } else if utilization < threshold / 2.0 {
        pods.saturating_sub(step_size)
    } else {
        pods
    };
    ScalingAction { target_pods }
}

/// Threshold autoscaler on the state's own CPU reading.
pub fn threshold_autoscaler(state: &ClusterState, threshold: f64, step_size: u32) -> ScalingAction {
    threshold_rule(state.per_pod_cpu, state.pods, threshold, step_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise_free() -> LatencyModel {
        LatencyModel {
            noise_std: 0.0,
            ..LatencyModel::default()
        }
    }

    fn hold(state: &ClusterState) -> ScalingAction {
        ScalingAction {
            target_pods: state.pods,
        }
    }

    #[test]
    fn idle_tick_shows_base_latency_and_zero_utilization() {
        let state = ClusterState::new(4, (1, 10)).unwrap();
        let lm = noise_free();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, m) = step(&state, hold(&state), 0.0, &lm, &mut rng);
        assert_eq!(m.latency, lm.base_latency);
        assert_eq!(m.cpu, 0.0);
        assert_eq!(m.mem, MEM_BASE_MIB);
        assert_eq!(next.queue_len, 0.0);
        assert_eq!(next.tick, 1);
    }

    #[test]
    fn actions_are_clamped_to_pod_bounds() {
        let state = ClusterState::new(4, (2, 10)).unwrap();
        let lm = noise_free();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (up, _) = step(&state, ScalingAction { target_pods: 99 }, 0.0, &lm, &mut rng);
        assert_eq!(up.pods, 10);
        let (down, _) = step(&state, ScalingAction { target_pods: 0 }, 0.0, &lm, &mut rng);
        assert_eq!(down.pods, 2);
    }

    #[test]
    fn half_loaded_cluster_settles_at_half_utilization() {
        // Flow balance: with Poisson(2) arrivals against capacity 4·1.0, the
        // long-run mean utilization is λ/(pods·μ) = 0.5.
        let spec = crate::cloudsim::WorkloadSpec::poisson(2.0, 5000);
        let arrivals = crate::cloudsim::generate_workload(&spec, 21).unwrap();
        let lm = LatencyModel {
            service_rate: 1.0,
            ..noise_free()
        };
        let mut state = ClusterState::new(4, (4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total_cpu = 0.0;
        for a in &arrivals {
            let (next, m) = step(&state, hold(&state), *a, &lm, &mut rng);
            state = next;
            total_cpu += m.cpu;
        }
        let mean = total_cpu / 5000.0;
        assert!(
            (mean - 0.5).abs() / 0.5 < 0.02,
            "mean utilization {mean}, expected ≈ 0.5"
        );
    }

    #[test]
    fn erlang_wait_matches_textbook_formula() {
        // Independent oracle: C(c, a) = (a^c/c!) / (a^c/c! + (1−ρ)·Σ_{k<c} a^k/k!),
        // wait = C/(c·μ − λ), computed here with explicit factorials.
        for (c, lambda, mu) in [(1u32, 0.6, 1.0), (2, 1.2, 1.0), (5, 3.0, 1.0), (3, 0.5, 0.25)] {
            let a: f64 = lambda / mu;
            let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
            let top = a.powi(c as i32) / fact(c);
            let sum: f64 = (0..c).map(|k| a.powi(k as i32) / fact(k)).sum();
            let rho = a / c as f64;
            let c_prob = top / (top + (1.0 - rho) * sum);
            let expect = c_prob / (c as f64 * mu - lambda);
            assert_relative_eq!(erlang_c_wait(c, lambda, mu), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn latency_is_monotone_non_increasing_in_pods() {
        let lm = noise_free();
        let mut prev = f64::INFINITY;
        for pods in 1..=50u32 {
            let state = ClusterState {
                queue_len: 3.0,
                ..ClusterState::new(pods, (1, 50)).unwrap()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (_, m) = step(&state, hold(&state), 0.8, &lm, &mut rng);
            assert!(
                m.latency <= prev,
                "latency rose from {prev} to {} at {pods} pods",
                m.latency
            );
            prev = m.latency;
        }
    }

    #[test]
    fn memory_is_linear_in_per_pod_throughput() {
        let lm = LatencyModel {
            service_rate: 1.0,
            ..noise_free()
        };
        let state = ClusterState::new(2, (1, 10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, m) = step(&state, hold(&state), 1.0, &lm, &mut rng);
        // served = 1.0 over 2 pods → 0.5 requests/tick each.
        assert_relative_eq!(m.mem, MEM_BASE_MIB + MEM_PER_THROUGHPUT_MIB * 0.5);
    }

    #[test]
    fn threshold_rule_moves_in_the_documented_directions() {
        assert_eq!(threshold_rule(0.9, 5, 0.7, 1).target_pods, 6);
        assert_eq!(threshold_rule(0.2, 5, 0.7, 1).target_pods, 4);
        assert_eq!(threshold_rule(0.5, 5, 0.7, 1).target_pods, 5);
        // Boundary: exactly at the threshold or half-threshold holds.
        assert_eq!(threshold_rule(0.7, 5, 0.7, 1).target_pods, 5);
        assert_eq!(threshold_rule(0.35, 5, 0.7, 1).target_pods, 5);
    }

    #[test]
    fn low_utilization_at_the_floor_stays_at_the_floor() {
        let state = ClusterState::new(1, (1, 10)).unwrap();
        let action = threshold_autoscaler(&state, 0.7, 1);
        assert_eq!(action.target_pods, 0);
        let lm = noise_free();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (next, _) = step(&state, action, 0.0, &lm, &mut rng);
        assert_eq!(next.pods, 1);
    }

    #[test]
    fn invalid_bounds_and_models_are_rejected() {
        assert!(ClusterState::new(1, (0, 5)).is_err());
        assert!(ClusterState::new(1, (3, 2)).is_err());
        assert!(ClusterState::new(9, (1, 5)).is_err());
        let mut lm = LatencyModel::default();
        lm.service_rate = 0.0;
        assert!(lm.validate().is_err());
        lm = LatencyModel::default();
        lm.lipschitz_l = -1.0;
        assert!(lm.validate().is_err());
        lm = LatencyModel::default();
        lm.noise_std = f64::NAN;
        assert!(lm.validate().is_err());
    }

    proptest! {
        // Work is conserved exactly and utilization stays in [0, 1].
        #[test]
        fn conservation_and_bounded_utilization(
            queue in 0.0f64..50.0,
            arrivals in 0.0f64..20.0,
            target in 0u32..60,
            pods in 1u32..50,
        ) {
            let state = ClusterState {
                queue_len: queue,
                ..ClusterState::new(pods.min(40), (1, 40)).unwrap()
            };
            let lm = noise_free();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (next, m) = step(&state, ScalingAction { target_pods: target }, arrivals, &lm, &mut rng);
            let served = queue + arrivals - next.queue_len;
            prop_assert_eq!(queue + arrivals, served + next.queue_len);
            prop_assert!(m.cpu >= 0.0 && m.cpu <= 1.0);
            prop_assert!(next.queue_len >= 0.0);
            prop_assert!(next.pods >= 1 && next.pods <= 40);
            prop_assert!(m.latency >= 0.0);
        }
    }
}
