//! The closed scaling loop: workload → measurement → scaler → cluster step,
//! for every autoscaler variant.
//!
//! Three scaler families share the loop. Threshold scalers (`TH`, `KF`, `NA`)
//! apply the crossing rule to raw, filtered, or no utilization at all. Bandit
//! scalers (`DR`, `DRKF`, `DRRQ`) choose among candidate pod targets with a
//! GP reward model over per-arm contexts; they differ only in the context
//! signal — raw window mean, the attention-EKF estimate, or the ρ-heuristic
//! selection between the configured and the learned filter.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bandit::{
    select_context, ucb_beta, ArmSet, ContextSource, ContextVector, ContextualBandit, FeatureMap,
    FilterNoise, GpReward, RegretTrace, RewardSample, RHO_MIN_DEFAULT,
};
use crate::error::{Error, Result};
use crate::estimator::kf::UpdateForm;
use crate::estimator::pipeline::KsurfConfig;
use crate::estimator::{AttentionConfig, AttentionNetwork, KsurfEstimator, PcaBasis, StateEstimate, SystemModel};
use crate::surrogate::Kernel;

use super::cluster::{
    step, threshold_rule, ClusterState, LatencyModel, ScalingAction, TickMetrics,
};
use super::workload::{generate_workload, WorkloadSpec};

/// One millipod as a utilization fraction of a single pod's CPU.
pub const MILLIPOD: f64 = 0.001;

/// Reward weight of (inverted, normalized) latency.
pub const LATENCY_WEIGHT: f64 = 0.7;

/// Reward weight of (inverted, normalized) pod cost.
pub const POD_COST_WEIGHT: f64 = 0.3;

/// Attention-smoothing window of the filtered scalers.
const SMOOTHING_WINDOW: usize = 8;

/// Lower clamp on the exploration trust scale, so a filter that reports a
/// near-zero variance ratio can never switch exploration off entirely.
const RHO_TRUST_FLOOR: f64 = 0.05;

// Per-purpose RNG stream salts, so reordering draws in one stream cannot
// disturb another.
const CLUSTER_STREAM: u64 = 0x636c_7573;
const MEASUREMENT_STREAM: u64 = 0x6d65_6173;

/// Autoscaler variants the simulator can drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ScalerKind {
    /// Bandit on the raw measurement context.
    #[serde(rename = "DR")]
    Dr,
    /// Bandit on the attention-EKF filtered context.
    #[serde(rename = "DRKF")]
    Drkf,
    /// Bandit with ρ-heuristic selection between the configured-noise and
    /// learned-noise filter contexts.
    #[serde(rename = "DRRQ")]
    Drrq,
    /// Threshold rule on the filtered utilization.
    #[serde(rename = "KF")]
    Kf,
    /// Threshold rule on the raw utilization.
    #[serde(rename = "TH")]
    Th,
    /// Never scales.
    #[serde(rename = "NA")]
    Na,
}

impl ScalerKind {
    pub const ALL: [ScalerKind; 6] = [
        ScalerKind::Dr,
        ScalerKind::Drkf,
        ScalerKind::Drrq,
        ScalerKind::Kf,
        ScalerKind::Th,
        ScalerKind::Na,
    ];

    /// Bandit-driven scalers produce a regret trace.
    pub fn is_bandit(self) -> bool {
        matches!(self, ScalerKind::Dr | ScalerKind::Drkf | ScalerKind::Drrq)
    }
}

impl std::fmt::Display for ScalerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ScalerKind::Dr => "DR",
            ScalerKind::Drkf => "DRKF",
            ScalerKind::Drrq => "DRRQ",
            ScalerKind::Kf => "KF",
            ScalerKind::Th => "TH",
            ScalerKind::Na => "NA",
        };
        f.write_str(name)
    }
}

impl FromStr for ScalerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "DR" => Ok(ScalerKind::Dr),
            "DRKF" => Ok(ScalerKind::Drkf),
            "DRRQ" => Ok(ScalerKind::Drrq),
            "KF" => Ok(ScalerKind::Kf),
            "TH" => Ok(ScalerKind::Th),
            "NA" => Ok(ScalerKind::Na),
            other => Err(Error::Config(format!(
                "unknown scaler '{other}', expected DR|DRKF|DRRQ|KF|TH|NA"
            ))),
        }
    }
}

fn default_threshold() -> f64 {
    500.0
}
fn default_pod_bounds() -> (u32, u32) {
    (1, 50)
}
fn default_initial_pods() -> u32 {
    5
}
fn default_decision_every() -> usize {
    1
}
fn default_scaling_step() -> u32 {
    1
}
fn default_actuation_delay() -> usize {
    3
}
fn default_measurement_noise() -> f64 {
    0.02
}
fn default_filter_noise() -> (f64, f64) {
    (0.001, 0.09)
}
fn default_rho_min() -> f64 {
    RHO_MIN_DEFAULT
}
fn default_reward_kernel() -> Kernel {
    // Contexts are standardized and shrunk into the unit ball, so adjacent
    // pod targets sit ~0.1–0.2 apart there: the lengthscale must resolve
    // that. The signal variance matches the observed spread of centered
    // round rewards (~0.2 std) — leaving it at the unit prior would hand
    // every never-sampled context an exploration bonus several times the
    // whole reward range, and the optimizer would chase novelty instead of
    // latency. The noise floor carries the environment's own round-to-round
    // stochasticity: a p95 latency statistic keeps single-lump spikes, so
    // the same arm in the same context still scatters by roughly half the
    // signal spread.
    Kernel {
        lengthscale: 0.2,
        signal_variance: 0.04,
        noise_variance: 0.01,
        ..Kernel::default()
    }
}

/// Everything one scenario run needs; serializable as the scenario config
/// file format.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioConfig {
    pub scaler: ScalerKind,
    /// Threshold in millipods (1000 · utilization fraction); used by the
    /// threshold scalers, carried through reports for all.
    #[serde(default = "default_threshold")]
    pub threshold_millipods: f64,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default = "default_pod_bounds")]
    pub pod_bounds: (u32, u32),
    #[serde(default = "default_initial_pods")]
    pub initial_pods: u32,
    pub seed: u64,
    /// Ticks between scaling decisions.
    #[serde(default = "default_decision_every")]
    pub decision_every: usize,
    /// Pod step of the threshold rule and the bandit's arm spacing.
    #[serde(default = "default_scaling_step")]
    pub scaling_step: u32,
    /// Ticks between issuing an action and the pods becoming available.
    #[serde(default = "default_actuation_delay")]
    pub actuation_delay: usize,
    /// Gaussian noise added to every utilization reading.
    #[serde(default = "default_measurement_noise")]
    pub measurement_noise_std: f64,
    /// (q, r) noise of the configured filter.
    #[serde(default = "default_filter_noise")]
    pub filter_noise: (f64, f64),
    /// (q, r) of the learned filter the DRRQ heuristic can select; falls back
    /// to `filter_noise`.
    #[serde(default)]
    pub lekf_noise: Option<(f64, f64)>,
    /// ρ floor of the DRRQ context heuristic.
    #[serde(default = "default_rho_min")]
    pub rho_min: f64,
    /// Kernel of the bandit's GP reward surrogate.
    #[serde(default = "default_reward_kernel")]
    pub reward_kernel: Kernel,
}

impl ScenarioConfig {
    /// Minimal scenario: everything defaulted except the moving parts.
    pub fn new(scaler: ScalerKind, workload: WorkloadSpec, seed: u64) -> Self {
        Self {
            scaler,
            threshold_millipods: default_threshold(),
            workload,
            latency: LatencyModel::default(),
            pod_bounds: default_pod_bounds(),
            initial_pods: default_initial_pods(),
            seed,
            decision_every: default_decision_every(),
            scaling_step: default_scaling_step(),
            actuation_delay: default_actuation_delay(),
            measurement_noise_std: default_measurement_noise(),
            filter_noise: default_filter_noise(),
            lekf_noise: None,
            rho_min: default_rho_min(),
            reward_kernel: default_reward_kernel(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        self.latency.validate()?;
        if !(self.threshold_millipods > 0.0 && self.threshold_millipods.is_finite()) {
            return Err(Error::Config(format!(
                "threshold {} millipods must be positive",
                self.threshold_millipods
            )));
        }
        if self.decision_every == 0 {
            return Err(Error::Config("decision interval must be ≥ 1 tick".into()));
        }
        if self.scaling_step == 0 {
            return Err(Error::Config("scaling step must be ≥ 1 pod".into()));
        }
        if self.measurement_noise_std < 0.0 || !self.measurement_noise_std.is_finite() {
            return Err(Error::Config(format!(
                "measurement noise {} must be nonnegative",
                self.measurement_noise_std
            )));
        }
        for (q, r) in [self.filter_noise, self.lekf_noise.unwrap_or(self.filter_noise)] {
            if q <= 0.0 || r <= 0.0 || !q.is_finite() || !r.is_finite() {
                return Err(Error::Config(format!(
                    "filter noise (q={q}, r={r}) must be positive"
                )));
            }
        }
        if !self.rho_min.is_finite() {
            return Err(Error::NonFinite("rho_min must be finite".into()));
        }
        self.reward_kernel.validate()?;
        ClusterState::new(self.initial_pods, self.pod_bounds)?;
        Ok(())
    }
}

/// Everything one scenario run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub scaler: ScalerKind,
    pub threshold_millipods: f64,
    pub seed: u64,
    pub metrics: Vec<TickMetrics>,
    /// Regret/ρ history; bandit scalers only.
    pub regret: Option<RegretTrace>,
}

impl ExperimentResult {
    pub fn latencies(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.latency).collect()
    }

    pub fn pod_counts(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| f64::from(m.pods)).collect()
    }

    /// Writes the per-tick metrics as `tick,pods,cpu,mem,queue,latency` CSV.
    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["tick", "pods", "cpu", "mem", "queue", "latency"])?;
        for m in &self.metrics {
            wtr.write_record(&[
                m.tick.to_string(),
                m.pods.to_string(),
                m.cpu.to_string(),
                m.mem.to_string(),
                m.queue.to_string(),
                m.latency.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_metrics_csv_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::Io(format!("creating {}: {e}", path.display())))?;
        self.write_metrics_csv(file)
    }
}

/// Excess latency, in multiples of the latency floor, at which the latency
/// penalty reaches half scale. The penalty saturates hyperbolically instead
/// of clamping, so deeper overload always scores worse — a scaler stuck in a
/// backlog still sees a gradient pointing out of it.
pub const LATENCY_HALF_PENALTY: f64 = 8.0;

/// Reward for one decision round: the latency term scores the round's p95
/// latency — a single bad tick taxes the whole round, the way a tail-latency
/// objective would — and the cost term scores the mean fleet size. Both terms
/// are normalized to [0, 1], so the blend is too.
pub fn round_reward(latencies: &[f64], mean_pods: f64, lm: &LatencyModel, max_pods: u32) -> f64 {
    let p95 = crate::stats::percentile(latencies, 95.0).unwrap_or(lm.base_latency);
    let excess = (p95 - lm.base_latency).max(0.0);
    let half = LATENCY_HALF_PENALTY * lm.base_latency;
    let norm_latency = excess / (excess + half);
    let cost = mean_pods / f64::from(max_pods);
    (LATENCY_WEIGHT * (1.0 - norm_latency) + POD_COST_WEIGHT * (1.0 - cost)).clamp(0.0, 1.0)
}

/// The attention-EKF smoothing stack every filtered scaler runs: identity
/// PCA, uniform single-head attention (a moving average over the window),
/// then a scalar random-walk EKF with the given noise.
fn smoothing_filter(q: f64, r: f64) -> Result<KsurfEstimator> {
    let model = SystemModel::scalar_random_walk(q, r)?;
    let cfg = AttentionConfig {
        input_dim: 1,
        layers: 1,
        heads: 1,
        model_dim: 1,
        attn_dim: 1,
        ff_multiplier: 2,
        dropout: 0.0,
    };
    let net = AttentionNetwork::identity_projection(cfg)?;
    KsurfEstimator::new(
        model,
        StateEstimate::zeroed(1),
        Some((net, PcaBasis::identity(1))),
        KsurfConfig {
            window: SMOOTHING_WINDOW,
            embed_width: 1,
            update_form: UpdateForm::Standard,
        },
    )
}

/// A bandit decision waiting for its reward window to close.
struct OpenRound {
    context: ContextVector,
    chosen: usize,
    expected_chosen: f64,
    oracle: f64,
    noise: FilterNoise,
}

/// Noise-free rollout of holding `target` over the upcoming arrivals,
/// including the actuation pipeline; returns the round reward of that
/// rollout. This is the true expected reward the regret accounting measures
/// against.
fn expected_reward(
    state: &ClusterState,
    pending: &VecDeque<u32>,
    target: u32,
    arrivals: &[f64],
    lm_noise_free: &LatencyModel,
    max_pods: u32,
) -> f64 {
    if arrivals.is_empty() {
        return 0.0;
    }
    let mut sim = *state;
    let mut queue = pending.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut latencies = Vec::with_capacity(arrivals.len());
    let mut pods_sum = 0.0;
    for a in arrivals {
        queue.push_back(target);
        let effective = queue.pop_front().unwrap_or(target);
        let (next, m) = step(
            &sim,
            ScalingAction {
                target_pods: effective,
            },
            *a,
            lm_noise_free,
            &mut rng,
        );
        sim = next;
        latencies.push(m.latency);
        pods_sum += f64::from(m.pods);
    }
    round_reward(
        &latencies,
        pods_sum / arrivals.len() as f64,
        lm_noise_free,
        max_pods,
    )
}

/// Candidate pod targets around the current count: two steps down to two
/// steps up, clamped to the bounds. Clamping collapses neighbors into
/// duplicates near a bound, so the list is deduplicated — duplicate arms
/// would carry identical contexts and skew the arm count the exploration
/// schedule sees.
fn candidate_targets(pods: u32, step_size: u32, bounds: (u32, u32)) -> Vec<u32> {
    let s = i64::from(step_size);
    let mut targets: Vec<u32> = [-2 * s, -s, 0, s, 2 * s]
        .iter()
        .map(|d| {
            (i64::from(pods) + d).clamp(i64::from(bounds.0), i64::from(bounds.1)) as u32
        })
        .collect();
    targets.dedup();
    targets
}

/// Runs one full scenario. Deterministic: identical configs (seed included)
/// produce identical results.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let arrivals = generate_workload(&cfg.workload, cfg.seed)?;
    let horizon = cfg.workload.horizon;
    let lm = cfg.latency;
    let lm_noise_free = LatencyModel {
        noise_std: 0.0,
        ..lm
    };
    let threshold = cfg.threshold_millipods * MILLIPOD;
    let (_, filter_r) = cfg.filter_noise;
    let max_pods = cfg.pod_bounds.1;
    // Std of the round reward, from latency measurement noise through the
    // latency term at its steepest (near the floor); the p95 statistic does
    // not average noise away, so there is no window shrink.
    let reward_noise =
        LATENCY_WEIGHT * lm.noise_std / (LATENCY_HALF_PENALTY * lm.base_latency);

    let mut cluster_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ CLUSTER_STREAM);
    let mut meas_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MEASUREMENT_STREAM);

    let mut state = ClusterState::new(cfg.initial_pods, cfg.pod_bounds)?;
    let mut pending: VecDeque<u32> =
        std::iter::repeat_n(cfg.initial_pods, cfg.actuation_delay).collect();
    let mut last_target = cfg.initial_pods;

    let mut ekf = match cfg.scaler {
        ScalerKind::Kf | ScalerKind::Drkf | ScalerKind::Drrq => {
            Some(smoothing_filter(cfg.filter_noise.0, cfg.filter_noise.1)?)
        }
        _ => None,
    };
    let mut lekf = if cfg.scaler == ScalerKind::Drrq {
        let (ql, rl) = cfg.lekf_noise.unwrap_or(cfg.filter_noise);
        Some(smoothing_filter(ql, rl)?)
    } else {
        None
    };

    let mut bandit = if cfg.scaler.is_bandit() {
        Some(ContextualBandit::new(GpReward::new(cfg.reward_kernel)?))
    } else {
        None
    };
    // Per-arm context: the utilization signal plus the candidate action —
    // the measurement is the only state the bandit sees.
    let mut features = FeatureMap::new(2);
    let mut open_round: Option<OpenRound> = None;

    let mut window_z_sum = 0.0;
    let mut window_ticks = 0usize;
    let mut last_z = 0.0;
    let mut round_latencies: Vec<f64> = Vec::with_capacity(cfg.decision_every);
    let mut round_pods_sum = 0.0;
    let mut metrics = Vec::with_capacity(horizon);

    for t in 0..horizon {
        if t > 0 && t % cfg.decision_every == 0 {
            let window_mean = window_z_sum / window_ticks.max(1) as f64;
            match cfg.scaler {
                ScalerKind::Na => last_target = state.pods,
                ScalerKind::Th => {
                    last_target =
                        threshold_rule(window_mean, state.pods, threshold, cfg.scaling_step)
                            .target_pods;
                }
                ScalerKind::Kf => {
                    let filtered = ekf.as_ref().expect("KF scaler owns a filter").state().x[0];
                    last_target = threshold_rule(filtered, state.pods, threshold, cfg.scaling_step)
                        .target_pods;
                }
                ScalerKind::Dr | ScalerKind::Drkf | ScalerKind::Drrq => {
                    let b = bandit.as_mut().expect("bandit scaler owns a bandit");
                    if let Some(round) = open_round.take() {
                        let realized = round_reward(
                            &round_latencies,
                            round_pods_sum / round_latencies.len().max(1) as f64,
                            &lm,
                            max_pods,
                        );
                        b.observe(
                            round.context,
                            round.chosen,
                            RewardSample::new(realized, reward_noise),
                            round.expected_chosen,
                            round.oracle,
                            round.noise,
                        )?;
                        round_latencies.clear();
                        round_pods_sum = 0.0;
                    }

                    let candidates = candidate_targets(state.pods, cfg.scaling_step, cfg.pod_bounds);
                    // Until the first ρ is known the heuristic trusts the
                    // configured filter (the small-ρ branch).
                    let rho_prev = b.rho_prev().unwrap_or(0.0);
                    let ekf_signal = ekf.as_ref().map(|f| f.state().x[0]);
                    let lekf_signal = lekf.as_ref().map(|f| f.state().x[0]);

                    let mut contexts = Vec::with_capacity(candidates.len());
                    for &c_pods in &candidates {
                        let target_frac = f64::from(c_pods) / f64::from(max_pods);
                        let raw = |signal: f64| DVector::from_vec(vec![signal, target_frac]);
                        let ctx = match cfg.scaler {
                            ScalerKind::Dr => {
                                // The raw context is the latest reading, not
                                // a window mean — unsmoothed by design.
                                let x = raw(last_z);
                                features.push(&x)?;
                                features.map(&x, ContextSource::RawObservation)?
                            }
                            ScalerKind::Drkf => {
                                let x = raw(ekf_signal.expect("DRKF owns a filter"));
                                features.push(&x)?;
                                features.map(&x, ContextSource::Ekf)?
                            }
                            ScalerKind::Drrq => {
                                let xe = raw(ekf_signal.expect("DRRQ owns a filter"));
                                let xl = raw(lekf_signal.expect("DRRQ owns a learned filter"));
                                let use_ekf = rho_prev.abs() <= cfg.rho_min.abs();
                                features.push(if use_ekf { &xe } else { &xl })?;
                                let e = features.map(&xe, ContextSource::Ekf)?;
                                let l = features.map(&xl, ContextSource::LEkf)?;
                                select_context(rho_prev, cfg.rho_min, &e, &l)
                            }
                            _ => unreachable!("non-bandit scaler in bandit branch"),
                        };
                        contexts.push(ctx);
                    }

                    let end = (t + cfg.decision_every).min(horizon);
                    let expected: Vec<f64> = candidates
                        .iter()
                        .map(|&c| {
                            expected_reward(&state, &pending, c, &arrivals[t..end], &lm_noise_free, max_pods)
                        })
                        .collect();
                    let oracle = expected.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));

                    let arms = ArmSet::new(candidates.clone(), contexts)?;
                    // Exploration trust: the variance-reduction ratio measures
                    // how much residual noise the context source carries, so
                    // the confidence radius contracts with it — a policy whose
                    // filter has converged (small ρ) narrows its search around
                    // the model's ranking, while one whose filter is surprised
                    // (ρ near 1, e.g. mid-surge) widens it again. The raw
                    // observation source always measures ρ = 1 and keeps the
                    // full default schedule; the scale is the policy's own
                    // measurement, never the scaler's identity.
                    let trust = b
                        .rho_prev()
                        .map_or(1.0, |r| r.abs().clamp(RHO_TRUST_FLOOR, 1.0));
                    let beta = ucb_beta(arms.len(), b.round() + 1) * trust;
                    let pick = b.select_with_beta(&arms, beta);

                    let posterior_var = |f: &KsurfEstimator| f.state().p[(0, 0)];
                    let tr_jpj = match cfg.scaler {
                        ScalerKind::Dr => filter_r,
                        ScalerKind::Drkf => posterior_var(ekf.as_ref().unwrap()),
                        ScalerKind::Drrq => {
                            if rho_prev.abs() <= cfg.rho_min.abs() {
                                posterior_var(ekf.as_ref().unwrap())
                            } else {
                                posterior_var(lekf.as_ref().unwrap())
                            }
                        }
                        _ => unreachable!(),
                    };
                    open_round = Some(OpenRound {
                        context: arms.context(pick).clone(),
                        chosen: pick,
                        expected_chosen: expected[pick],
                        oracle,
                        noise: FilterNoise {
                            tr_jpj,
                            tr_jhrhj: filter_r,
                        },
                    });
                    last_target = candidates[pick];
                }
            }
            window_z_sum = 0.0;
            window_ticks = 0;
        }

        pending.push_back(last_target);
        let effective = pending.pop_front().unwrap_or(last_target);
        let (next, m) = step(
            &state,
            ScalingAction {
                target_pods: effective,
            },
            arrivals[t],
            &lm,
            &mut cluster_rng,
        );
        state = next;

        let z = m.cpu + cfg.measurement_noise_std * meas_rng.sample::<f64, _>(StandardNormal);
        window_z_sum += z;
        window_ticks += 1;
        last_z = z;
        let z_vec = DVector::from_element(1, z);
        if let Some(f) = ekf.as_mut() {
            f.step(&z_vec)?;
        }
        if let Some(f) = lekf.as_mut() {
            f.step(&z_vec)?;
        }
        if open_round.is_some() {
            round_latencies.push(m.latency);
            round_pods_sum += f64::from(m.pods);
        }
        metrics.push(m);
    }

    Ok(ExperimentResult {
        scaler: cfg.scaler,
        threshold_millipods: cfg.threshold_millipods,
        seed: cfg.seed,
        metrics,
        regret: bandit.map(ContextualBandit::into_trace),
    })
}
