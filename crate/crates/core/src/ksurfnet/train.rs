//! Offline noise-covariance learning: filter-in-the-loop training, grid
//! search over (learning rate, epochs), and decile-wise comparison against a
//! fixed-noise baseline.
//!
//! Per mini-batch the EKF is treated as a black box: the loss — mean squared
//! one-step prediction residual ‖z_k − H·x̂⁻_k‖² over the training subset —
//! is differentiated w.r.t. the handful of emitted noise parameters by
//! central finite differences, and that gradient is chained into full
//! backprop-through-time on the LSTM. The filter recursion itself is never
//! differentiated.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::kf::{kf_predict, kf_update, StateEstimate};
use crate::estimator::model::SystemModel;
use crate::optim::{Adam, AdamConfig};
use crate::stats::{confidence_interval, mean};
use crate::trace::Trace;

use super::lstm::{
    backward_seq, forward_seq, LstmConfig, LstmGrads, LstmInput, LstmParams, NoiseEstimate,
};

/// Loss ceiling beyond which training aborts, keeping the last stable
/// parameters.
const DIVERGENCE_LIMIT: f64 = 1e6;

/// Fraction of the trace used for parameter updates; the rest validates.
const TRAIN_FRACTION: f64 = 0.8;

/// Trained network plus bookkeeping for model selection.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Noise estimate from the trained network (mean raw output over the
    /// training windows, softplus-mapped).
    pub noise: NoiseEstimate,
    pub params: LstmParams,
    pub config: LstmConfig,
    /// Mean batch loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    /// EKF MAE on the held-out validation slice with the learned noise.
    pub validation_mae: f64,
    /// True when training hit the divergence guard and kept the last stable
    /// parameters.
    pub diverged: bool,
}

/// Swaps the learned covariances into a copy of the model.
pub fn apply_noise(model: &SystemModel, noise: &NoiseEstimate) -> Result<SystemModel> {
    let mut m = model.clone();
    m.set_noise(noise.q.clone(), noise.r.clone())?;
    Ok(m)
}

/// Mean squared one-step prediction residual of the EKF over a trace.
fn prediction_loss(z: &[DVector<f64>], model: &SystemModel) -> Result<f64> {
    let mut state = StateEstimate::zeroed(model.state_dim());
    let mut total = 0.0;
    for zk in z {
        let prior = kf_predict(&state, model)?;
        let residual = zk - model.observe(&prior.x);
        total += residual.norm_squared();
        state = kf_update(&prior, zk, model)?;
    }
    Ok(total / z.len() as f64)
}

/// Per-step absolute filter error over a trace: against ground truth when the
/// trace carries it (posterior error), otherwise the one-step prediction
/// residual.
pub fn ekf_abs_errors(
    trace: &Trace,
    model: &SystemModel,
    noise: &NoiseEstimate,
) -> Result<Vec<f64>> {
    let model = apply_noise(model, noise)?;
    let mut state = StateEstimate::zeroed(model.state_dim());
    let mut errors = Vec::with_capacity(trace.len());
    for (k, zk) in trace.z.iter().enumerate() {
        let prior = kf_predict(&state, &model)?;
        let prediction_err = (zk - model.observe(&prior.x)).norm();
        state = kf_update(&prior, zk, &model)?;
        match &trace.truth {
            Some(truth) => errors.push((&state.x - &truth[k]).norm()),
            None => errors.push(prediction_err),
        }
    }
    Ok(errors)
}

/// The EKF loss as a function of raw noise parameters.
fn loss_of_raw(raw: &DVector<f64>, z: &[DVector<f64>], model: &SystemModel) -> Result<f64> {
    let noise = NoiseEstimate::from_raw(raw.clone(), model.obs_dim(), model.state_dim())?;
    prediction_loss(z, &apply_noise(model, &noise)?)
}

/// Central finite differences of the EKF loss w.r.t. the raw noise vector.
fn fd_loss_gradient(
    raw: &DVector<f64>,
    z: &[DVector<f64>],
    model: &SystemModel,
) -> Result<DVector<f64>> {
    let mut grad = DVector::zeros(raw.len());
    for j in 0..raw.len() {
        let h = 1e-4 * (1.0 + raw[j].abs());
        let mut plus = raw.clone();
        plus[j] += h;
        let mut minus = raw.clone();
        minus[j] -= h;
        grad[j] = (loss_of_raw(&plus, z, model)? - loss_of_raw(&minus, z, model)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Network input windows: raw measurements, or innovations under the model's
/// configured noise.
fn build_inputs(z: &[DVector<f64>], model: &SystemModel, kind: LstmInput) -> Result<Vec<DVector<f64>>> {
    match kind {
        LstmInput::Raw => Ok(z.to_vec()),
        LstmInput::Innovations => {
            let mut state = StateEstimate::zeroed(model.state_dim());
            let mut out = Vec::with_capacity(z.len());
            for zk in z {
                let prior = kf_predict(&state, model)?;
                out.push(zk - model.observe(&prior.x));
                state = kf_update(&prior, zk, model)?;
            }
            Ok(out)
        }
    }
}

/// Mean raw network output over every training window.
fn mean_raw_output(
    params: &LstmParams,
    inputs: &[DVector<f64>],
    seq_len: usize,
) -> Result<DVector<f64>> {
    let mut acc = DVector::zeros(params.obs_dim + params.state_dim);
    let mut count = 0;
    for w in inputs.windows(seq_len) {
        acc += forward_seq(params, w)?.raw;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Config("no training windows".into()));
    }
    Ok(acc / count as f64)
}

/// Trains the network on a trace and returns the learned noise estimate.
/// Deterministic for a fixed seed. `epochs = 0` returns the initialization
/// unchanged; a diverging loss aborts with the last stable parameters.
pub fn train_ksurfnet(
    trace: &Trace,
    model: &SystemModel,
    cfg: &LstmConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dim = trace
        .dim()
        .ok_or_else(|| Error::Empty("empty training trace".into()))?;
    if dim != model.obs_dim() {
        return Err(Error::Dimension(format!(
            "trace dim {dim} does not match model obs dim {}",
            model.obs_dim()
        )));
    }
    let split = ((trace.len() as f64) * TRAIN_FRACTION).floor() as usize;
    // The training slice must yield at least one window and the validation
    // slice at least one step.
    if split <= cfg.seq_len || split >= trace.len() {
        return Err(Error::Config(format!(
            "trace length {} is too short for seq_len {} with an 80/20 split",
            trace.len(),
            cfg.seq_len
        )));
    }
    let train = trace.slice(0, split)?;
    let validation = trace.slice(split, trace.len())?;
    let inputs = build_inputs(&train.z, model, cfg.input_kind)?;

    let mut params = LstmParams::random(cfg, dim, model.obs_dim(), model.state_dim(), seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut diverged = false;

    if cfg.epochs > 0 {
        let n_windows = inputs.len() - cfg.seq_len + 1;
        let mut order: Vec<usize> = (0..n_windows).collect();
        let mut flat = params.flatten();
        let mut adam = Adam::new(
            AdamConfig {
                lr: cfg.learning_rate,
                beta1: cfg.adam_betas.0,
                beta2: cfg.adam_betas.1,
                eps: cfg.adam_eps,
            },
            flat.len(),
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        'epochs: for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let stable = params.clone();
            let mut batch_losses = Vec::new();
            for chunk in order.chunks(cfg.batch) {
                // Forward every window in the batch; the batch-mean raw
                // output defines the filter's noise for the loss.
                let mut caches = Vec::with_capacity(chunk.len());
                let mut raw_mean = DVector::zeros(model.obs_dim() + model.state_dim());
                for &start in chunk {
                    let cache = forward_seq(&params, &inputs[start..start + cfg.seq_len])?;
                    raw_mean += &cache.raw;
                    caches.push(cache);
                }
                raw_mean /= chunk.len() as f64;

                let loss = loss_of_raw(&raw_mean, &train.z, model)?;
                if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                    log::warn!("training diverged (loss {loss}); keeping last stable parameters");
                    params = stable;
                    diverged = true;
                    break 'epochs;
                }
                batch_losses.push(loss);

                let d_raw_mean = fd_loss_gradient(&raw_mean, &train.z, model)?;
                let d_raw = &d_raw_mean / chunk.len() as f64;
                let mut grads = LstmGrads::zeros_like(&params);
                for cache in &caches {
                    grads.accumulate(&backward_seq(&params, cache, &d_raw));
                }
                adam.step(&mut flat, &grads.flatten());
                params.unflatten(&flat);
            }
            if !batch_losses.is_empty() {
                epoch_losses.push(mean(&batch_losses));
            }
        }
    }

    let raw = mean_raw_output(&params, &inputs, cfg.seq_len)?;
    let noise = NoiseEstimate::from_raw(raw, model.obs_dim(), model.state_dim())?;
    let validation_mae = mean(&ekf_abs_errors(&validation, model, &noise)?);
    Ok(TrainOutcome {
        noise,
        params,
        config: cfg.clone(),
        epoch_losses,
        validation_mae,
        diverged,
    })
}

/// Candidate sets for [`grid_search`].
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
}

/// One evaluated grid cell.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub learning_rate: f64,
    pub epochs: usize,
    pub validation_mae: f64,
    pub diverged: bool,
}

/// Trains every (λ, ε) cell and returns the config minimizing validation EKF
/// MAE, with ties broken by lowest learning rate then lowest epoch count.
/// Fails listing the cells when every candidate diverges.
pub fn grid_search(
    trace: &Trace,
    model: &SystemModel,
    base: &LstmConfig,
    grid: &GridSpec,
    seed: u64,
) -> Result<(LstmConfig, Vec<GridCell>)> {
    if grid.learning_rates.is_empty() || grid.epochs.is_empty() {
        return Err(Error::Config("grid must contain at least one cell".into()));
    }
    let mut combos = Vec::new();
    for &lr in &grid.learning_rates {
        for &ep in &grid.epochs {
            combos.push((lr, ep));
        }
    }
    // Cells are independent; train them in parallel with identical seeds so
    // the comparison is paired.
    let cells: Vec<GridCell> = combos
        .par_iter()
        .map(|&(lr, ep)| {
            let cfg = LstmConfig {
                learning_rate: lr,
                epochs: ep,
                ..base.clone()
            };
            let outcome = train_ksurfnet(trace, model, &cfg, seed)?;
            Ok(GridCell {
                learning_rate: lr,
                epochs: ep,
                validation_mae: outcome.validation_mae,
                diverged: outcome.diverged,
            })
        })
        .collect::<Result<_>>()?;

    let best = cells
        .iter()
        .filter(|c| !c.diverged && c.validation_mae.is_finite())
        .min_by(|a, b| {
            (a.validation_mae, a.learning_rate, a.epochs)
                .partial_cmp(&(b.validation_mae, b.learning_rate, b.epochs))
                .unwrap()
        });
    match best {
        Some(cell) => Ok((
            LstmConfig {
                learning_rate: cell.learning_rate,
                epochs: cell.epochs,
                ..base.clone()
            },
            cells.clone(),
        )),
        None => Err(Error::Diverged(format!(
            "every grid cell diverged: {:?}",
            cells
                .iter()
                .map(|c| format!("λ={} ε={}", c.learning_rate, c.epochs))
                .collect::<Vec<_>>()
        ))),
    }
}

/// Number of evaluation chunks.
pub const DECILES: usize = 10;

/// Per-decile Δ = MAE(learned) − MAE(baseline) with 95% CIs from the paired
/// per-step error differences. Negative Δ means the learned filter wins.
#[derive(Debug, Clone)]
pub struct DeltaSeries {
    pub deltas: Vec<f64>,
    pub ci: Vec<(f64, f64)>,
}

/// Chunks the trace into deciles and compares two noise parameterizations of
/// the same filter on each chunk.
pub fn evaluate_deciles(
    trace: &Trace,
    model: &SystemModel,
    learned: &NoiseEstimate,
    baseline: &NoiseEstimate,
) -> Result<DeltaSeries> {
    if trace.len() < DECILES {
        return Err(Error::Config(format!(
            "trace length {} cannot split into {DECILES} non-empty chunks",
            trace.len()
        )));
    }
    let err_l = ekf_abs_errors(trace, model, learned)?;
    let err_b = ekf_abs_errors(trace, model, baseline)?;
    let n = trace.len();
    let mut deltas = Vec::with_capacity(DECILES);
    let mut ci = Vec::with_capacity(DECILES);
    for d in 0..DECILES {
        let start = d * n / DECILES;
        let end = (d + 1) * n / DECILES;
        let diffs: Vec<f64> = (start..end).map(|k| err_l[k] - err_b[k]).collect();
        let point = mean(&diffs);
        let bounds = if diffs.len() >= 2 {
            let (lo, hi) = confidence_interval(&diffs, 0.95)?;
            // Zero-variance chunks collapse to the point.
            (lo.min(point), hi.max(point))
        } else {
            (point, point)
        };
        deltas.push(point);
        ci.push(bounds);
    }
    Ok(DeltaSeries { deltas, ci })
}
