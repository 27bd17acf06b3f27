//! Full measurement pipeline: PCA projection → attention smoothing → EKF.
//!
//! [`ksurf_step`] runs one pipeline pass over an explicit window;
//! [`KsurfEstimator`] owns the window/state bookkeeping for streaming use,
//! including the temporal embedding that lifts scalar telemetry into vectors
//! and an attention bypass for ablation runs.

use nalgebra::DVector;

use crate::error::{Error, Result};

use super::attention::AttentionNetwork;
use super::kf::{kf_predict, kf_update_with, StateEstimate, UpdateForm};
use super::model::SystemModel;
use super::pca::PcaBasis;
use super::window::MeasurementWindow;

/// One pipeline pass: project every window entry, smooth with attention,
/// reconstruct a filtered measurement, then EKF predict + update.
///
/// Window entries must match the basis input dimension. When the
/// reconstruction is wider than the model's measurement (temporally embedded
/// scalar streams), its final element — the denoised current sample — is the
/// filtered measurement.
pub fn ksurf_step(
    window: &MeasurementWindow,
    state: &StateEstimate,
    model: &SystemModel,
    net: &AttentionNetwork,
    basis: &PcaBasis,
) -> Result<StateEstimate> {
    let z_f = filter_measurement(window, model, net, basis)?;
    let prior = kf_predict(state, model)?;
    kf_update_with(&prior, &z_f, model, UpdateForm::Standard)
}

fn filter_measurement(
    window: &MeasurementWindow,
    model: &SystemModel,
    net: &AttentionNetwork,
    basis: &PcaBasis,
) -> Result<DVector<f64>> {
    let dim = window
        .dim()
        .ok_or_else(|| Error::Empty("measurement window is empty".into()))?;
    if dim != basis.input_dim() {
        return Err(Error::Dimension(format!(
            "window entry dim {dim} does not match PCA input dim {}",
            basis.input_dim()
        )));
    }
    let tokens: Vec<DVector<f64>> = window
        .iter()
        .map(|z| basis.project(z))
        .collect::<Result<_>>()?;
    let smoothed = net.forward(&tokens)?;
    let recon = basis.reconstruct(&smoothed)?;
    if recon.len() == model.obs_dim() {
        Ok(recon)
    } else if model.obs_dim() == 1 {
        Ok(DVector::from_element(1, recon[recon.len() - 1]))
    } else {
        Err(Error::Dimension(format!(
            "reconstructed dim {} fits neither obs dim {} nor a scalar stream",
            recon.len(),
            model.obs_dim()
        )))
    }
}

/// Streaming pipeline options.
#[derive(Debug, Clone)]
pub struct KsurfConfig {
    /// Attention token count (window length fed to the smoother).
    pub window: usize,
    /// Temporal embedding width for scalar streams; 1 disables embedding.
    pub embed_width: usize,
    /// Covariance update form.
    pub update_form: UpdateForm,
}

impl Default for KsurfConfig {
    fn default() -> Self {
        Self {
            window: 8,
            embed_width: 1,
            update_form: UpdateForm::Standard,
        }
    }
}

/// Stateful estimator: owns the measurement window, the filter state, and the
/// optional smoothing stage. With `smoother = None` every measurement goes
/// straight to the EKF (the ablation baseline).
#[derive(Debug, Clone)]
pub struct KsurfEstimator {
    model: SystemModel,
    state: StateEstimate,
    window: MeasurementWindow,
    smoother: Option<(AttentionNetwork, PcaBasis)>,
    cfg: KsurfConfig,
    rejected: u64,
}

impl KsurfEstimator {
    pub fn new(
        model: SystemModel,
        state: StateEstimate,
        smoother: Option<(AttentionNetwork, PcaBasis)>,
        cfg: KsurfConfig,
    ) -> Result<Self> {
        if cfg.window == 0 || cfg.embed_width == 0 {
            return Err(Error::Config(
                "window and embed_width must be at least 1".into(),
            ));
        }
        if cfg.embed_width > 1 && model.obs_dim() != 1 {
            return Err(Error::Config(
                "temporal embedding applies to scalar streams only".into(),
            ));
        }
        if let Some((net, basis)) = &smoother {
            let expect = if cfg.embed_width > 1 {
                cfg.embed_width
            } else {
                model.obs_dim()
            };
            if basis.input_dim() != expect {
                return Err(Error::Config(format!(
                    "PCA input dim {} does not match measurement dim {expect}",
                    basis.input_dim()
                )));
            }
            if net.cfg.input_dim != basis.k {
                return Err(Error::Config(format!(
                    "attention input dim {} does not match PCA components {}",
                    net.cfg.input_dim, basis.k
                )));
            }
        }
        // The raw window must cover `window` tokens, each spanning
        // `embed_width` consecutive samples.
        let raw_capacity = cfg.window + cfg.embed_width - 1;
        Ok(Self {
            model,
            state,
            window: MeasurementWindow::new(raw_capacity)?,
            smoother,
            cfg,
            rejected: 0,
        })
    }

    /// Plain-EKF construction: no smoothing stage, default windowing.
    pub fn plain(model: SystemModel, state: StateEstimate) -> Result<Self> {
        Self::new(model, state, None, KsurfConfig::default())
    }

    pub fn state(&self) -> &StateEstimate {
        &self.state
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    /// Measurements rejected as non-finite so far.
    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    /// Ingests one measurement and returns the posterior estimate. Non-finite
    /// measurements are rejected: the prior state is retained and an error
    /// returned, but the estimator stays usable.
    pub fn step(&mut self, z: &DVector<f64>) -> Result<&StateEstimate> {
        if z.iter().any(|v| !v.is_finite()) {
            self.rejected += 1;
            return Err(Error::NonFinite(
                "measurement rejected, prior retained".into(),
            ));
        }
        self.window.push(z.clone())?;
        let z_f = match &self.smoother {
            Some((net, basis)) => self.smoothed_measurement(net, basis)?.unwrap_or_else(|| z.clone()),
            None => z.clone(),
        };
        let prior = kf_predict(&self.state, &self.model)?;
        self.state = kf_update_with(&prior, &z_f, &self.model, self.cfg.update_form)?;
        Ok(&self.state)
    }

    /// Runs the smoothing stage; `None` while the window is still warming up
    /// (fewer samples than one embedding span).
    fn smoothed_measurement(
        &self,
        net: &AttentionNetwork,
        basis: &PcaBasis,
    ) -> Result<Option<DVector<f64>>> {
        if self.cfg.embed_width == 1 {
            return filter_measurement(&self.window, &self.model, net, basis).map(Some);
        }
        let raw: Vec<f64> = self.window.iter().map(|z| z[0]).collect();
        if raw.len() < self.cfg.embed_width {
            return Ok(None);
        }
        let mut tokens = MeasurementWindow::new(self.cfg.window)?;
        for w in raw.windows(self.cfg.embed_width) {
            tokens.push(DVector::from_column_slice(w))?;
        }
        filter_measurement(&tokens, &self.model, net, basis).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::attention::AttentionConfig;
    use crate::estimator::kf::kf_update;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_model(q: f64, r: f64) -> SystemModel {
        SystemModel::scalar_random_walk(q, r).unwrap()
    }

    fn identity_smoother(dim: usize) -> (AttentionNetwork, PcaBasis) {
        let cfg = AttentionConfig {
            input_dim: dim,
            layers: 1,
            heads: 1,
            model_dim: dim,
            attn_dim: dim,
            ff_multiplier: 2,
            dropout: 0.0,
        };
        (
            AttentionNetwork::identity_projection(cfg).unwrap(),
            PcaBasis::identity(dim),
        )
    }

    #[test]
    fn constant_noise_free_signal_converges_by_step_50() {
        let model = scalar_model(0.5, 0.5);
        let (net, basis) = identity_smoother(1);
        let mut est = KsurfEstimator::new(
            model,
            StateEstimate::zeroed(1),
            Some((net, basis)),
            KsurfConfig {
                window: 8,
                embed_width: 1,
                update_form: UpdateForm::Standard,
            },
        )
        .unwrap();
        let z = DVector::from_element(1, 4.0);
        for _ in 0..50 {
            est.step(&z).unwrap();
        }
        assert!(
            (est.state().x[0] - 4.0).abs() < 1e-6,
            "x̂ = {}",
            est.state().x[0]
        );
    }

    #[test]
    fn bypass_matches_plain_ekf_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = scalar_model(0.2, 0.8);
        let mut est = KsurfEstimator::plain(scalar_model(0.2, 0.8), StateEstimate::zeroed(1)).unwrap();
        let mut state = StateEstimate::zeroed(1);
        for _ in 0..200 {
            let z = DVector::from_element(1, rng.sample::<f64, _>(StandardNormal));
            est.step(&z).unwrap();
            let prior = kf_predict(&state, &model).unwrap();
            state = kf_update(&prior, &z, &model).unwrap();
            assert_eq!(est.state().x[0], state.x[0]);
            assert_eq!(est.state().p[(0, 0)], state.p[(0, 0)]);
        }
    }

    #[test]
    fn single_token_identity_smoother_matches_plain_ekf() {
        // Window of one token under identity projections is exact
        // pass-through, so the smoothed pipeline equals the raw EKF.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = scalar_model(0.2, 0.8);
        let (net, basis) = identity_smoother(1);
        let mut est = KsurfEstimator::new(
            scalar_model(0.2, 0.8),
            StateEstimate::zeroed(1),
            Some((net, basis)),
            KsurfConfig {
                window: 1,
                embed_width: 1,
                update_form: UpdateForm::Standard,
            },
        )
        .unwrap();
        let mut state = StateEstimate::zeroed(1);
        for _ in 0..100 {
            let z = DVector::from_element(1, 1.0 + rng.sample::<f64, _>(StandardNormal));
            est.step(&z).unwrap();
            let prior = kf_predict(&state, &model).unwrap();
            state = kf_update(&prior, &z, &model).unwrap();
            assert_relative_eq!(est.state().x[0], state.x[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn filtered_estimate_beats_raw_measurements() {
        // Random-walk truth observed in heavy noise: posterior MAE must not
        // exceed raw measurement MAE over a long run.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, r) = (0.05, 1.0);
        let model = scalar_model(q, r);
        let (net, basis) = identity_smoother(1);
        let mut est = KsurfEstimator::new(
            model,
            StateEstimate::zeroed(1),
            Some((net, basis)),
            KsurfConfig::default(),
        )
        .unwrap();
        let mut truth = 0.0;
        let (mut mae_est, mut mae_raw) = (0.0, 0.0);
        let steps = 1000;
        for _ in 0..steps {
            truth += q.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let z = truth + r.sqrt() * rng.sample::<f64, _>(StandardNormal);
            est.step(&DVector::from_element(1, z)).unwrap();
            mae_est += (est.state().x[0] - truth).abs();
            mae_raw += (z - truth).abs();
        }
        assert!(
            mae_est <= mae_raw,
            "estimate MAE {} vs raw MAE {}",
            mae_est / steps as f64,
            mae_raw / steps as f64
        );
    }

    #[test]
    fn non_finite_measurement_keeps_prior_and_counts() {
        let mut est =
            KsurfEstimator::plain(scalar_model(0.1, 0.5), StateEstimate::zeroed(1)).unwrap();
        est.step(&DVector::from_element(1, 2.0)).unwrap();
        let before = est.state().clone();
        let err = est.step(&DVector::from_element(1, f64::INFINITY));
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(est.state(), &before);
        assert_eq!(est.rejected(), 1);
        // Still usable afterwards.
        est.step(&DVector::from_element(1, 2.1)).unwrap();
        assert_eq!(est.state().step, 2);
    }

    #[test]
    fn temporal_embedding_mode_runs_and_converges() {
        // Scalar stream with width-4 embedding projected to 2 components.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let width = 4;
        let samples: Vec<DVector<f64>> = (0..100)
            .map(|i| {
                DVector::from_fn(width, |j, _| {
                    ((i + j) as f64 * 0.1).sin() + 0.05 * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect();
        let basis = crate::estimator::pca::fit_pca(&samples, 2).unwrap();
        let cfg = AttentionConfig {
            input_dim: 2,
            layers: 1,
            heads: 1,
            model_dim: 2,
            attn_dim: 2,
            ff_multiplier: 2,
            dropout: 0.0,
        };
        let net = AttentionNetwork::identity_projection(cfg).unwrap();
        let mut est = KsurfEstimator::new(
            scalar_model(0.3, 0.3),
            StateEstimate::zeroed(1),
            Some((net, basis)),
            KsurfConfig {
                window: 6,
                embed_width: width,
                update_form: UpdateForm::Standard,
            },
        )
        .unwrap();
        for i in 0..200 {
            let z = (i as f64 * 0.1).sin() + 0.05 * rng.sample::<f64, _>(StandardNormal);
            est.step(&DVector::from_element(1, z)).unwrap();
            assert!(est.state().x[0].is_finite());
        }
    }

    #[test]
    fn embedding_requires_scalar_stream() {
        let a = DMatrix::identity(2, 2);
        let h = DMatrix::identity(2, 2);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2);
        let model = SystemModel::linear(a, h, q, r).unwrap();
        let err = KsurfEstimator::new(
            model,
            StateEstimate::zeroed(2),
            None,
            KsurfConfig {
                window: 4,
                embed_width: 8,
                update_form: UpdateForm::Standard,
            },
        );
        assert!(err.is_err());
    }
}
