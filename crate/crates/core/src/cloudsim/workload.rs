//! Workload generation for the simulated cluster: Poisson arrivals with
//! flash-crowd amplitude windows, or a replayed arrival trace.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;

use crate::error::{Error, Result};

/// One flash-crowd window: arrivals inside `[start, start+duration)` are
/// multiplied by a factor that climbs linearly from 1 toward `amplitude`
/// over the first `ramp` ticks, holds, and descends over the last `ramp`
/// ticks. `ramp = 0` gives a rectangular burst.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlashCrowd {
    pub start: usize,
    pub duration: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub ramp: usize,
}

impl FlashCrowd {
    /// Multiplier applied `into` ticks after the window opened.
    fn factor(&self, into: usize) -> f64 {
        if self.ramp == 0 {
            return self.amplitude;
        }
        let up = (into + 1) as f64 / self.ramp as f64;
        let down = (self.duration - into) as f64 / self.ramp as f64;
        1.0 + (self.amplitude - 1.0) * up.min(down).min(1.0)
    }
}

/// Arrival-process description for one scenario.
///
/// Arrivals are drawn per tick from Poisson(`poisson_rate`) unless
/// `trace_override` replays a recorded arrival sequence; either way, flash
/// windows scale the affected ticks by their amplitude.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WorkloadSpec {
    /// Mean arrivals per tick of the Poisson process.
    pub poisson_rate: f64,
    /// Amplitude bursts; windows must fall inside the horizon.
    #[serde(default)]
    pub flash_crowds: Vec<FlashCrowd>,
    /// Replayed per-tick arrival counts; must cover the horizon.
    #[serde(default)]
    pub trace_override: Option<Vec<f64>>,
    /// Scenario length in ticks.
    pub horizon: usize,
}

impl WorkloadSpec {
    /// Steady Poisson workload with no bursts.
    pub fn poisson(rate: f64, horizon: usize) -> Self {
        Self {
            poisson_rate: rate,
            flash_crowds: Vec::new(),
            trace_override: None,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.poisson_rate.is_finite() || self.poisson_rate < 0.0 {
            return Err(Error::Config(format!(
                "poisson rate {} must be finite and nonnegative",
                self.poisson_rate
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1 tick".into()));
        }
        for fc in &self.flash_crowds {
            if fc.amplitude < 1.0 || !fc.amplitude.is_finite() {
                return Err(Error::Config(format!(
                    "flash amplitude {} must be a finite value ≥ 1",
                    fc.amplitude
                )));
            }
            if fc.start + fc.duration > self.horizon {
                return Err(Error::Config(format!(
                    "flash window [{}, {}) exceeds horizon {}",
                    fc.start,
                    fc.start + fc.duration,
                    self.horizon
                )));
            }
            if 2 * fc.ramp > fc.duration {
                return Err(Error::Config(format!(
                    "flash ramp {} does not fit twice into duration {}",
                    fc.ramp, fc.duration
                )));
            }
        }
        if let Some(trace) = &self.trace_override {
            if trace.len() < self.horizon {
                return Err(Error::Config(format!(
                    "arrival trace has {} ticks, horizon needs {}",
                    trace.len(),
                    self.horizon
                )));
            }
            if trace.iter().any(|a| !a.is_finite() || *a < 0.0) {
                return Err(Error::NonFinite(
                    "arrival trace must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Generates the per-tick arrival sequence for `spec`, deterministic in
/// `seed`. Flash windows scale the arrival *rate* of generated workloads —
/// a surge is more arrivals, not the same arrivals enlarged — and scale the
/// replayed values directly when a trace override is present. Replayed
/// traces are truncated to the horizon.
pub fn generate_workload(spec: &WorkloadSpec, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut factors = vec![1.0; spec.horizon];
    for fc in &spec.flash_crowds {
        for (into, f) in factors[fc.start..fc.start + fc.duration].iter_mut().enumerate() {
            *f *= fc.factor(into);
        }
    }
    let arrivals = match &spec.trace_override {
        Some(trace) => trace[..spec.horizon]
            .iter()
            .zip(&factors)
            .map(|(a, f)| a * f)
            .collect(),
        None if spec.poisson_rate == 0.0 => vec![0.0; spec.horizon],
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            factors
                .iter()
                .map(|f| {
                    let poisson = Poisson::new(spec.poisson_rate * f)
                        .map_err(|e| Error::Config(format!("poisson rate: {e}")))?;
                    Ok(rng.sample(poisson))
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };
    Ok(arrivals)
}
