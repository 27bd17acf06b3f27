//! Extended Kalman filter predict/update steps.
//!
//! Predict:
//! ```text
//!   x⁻ = f(x)
//!   P⁻ = J P Jᵀ + Q          (J = transition Jacobian at x)
//! ```
//!
//! Update:
//! ```text
//!   S  = H P⁻ Hᵀ + R
//!   K  = P⁻ Hᵀ S⁻¹
//!   x  = x⁻ + K (z − h(x⁻))
//!   P  = (I − K H) P⁻        (or Joseph form), then symmetrized
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

use super::model::SystemModel;

/// Filter state: mean, covariance, and discrete time index.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    /// State mean `x̂`.
    pub x: DVector<f64>,
    /// State covariance `P` (symmetric PSD).
    pub p: DMatrix<f64>,
    /// Discrete time index `k`, incremented by each measurement update.
    pub step: u64,
}

impl StateEstimate {
    pub fn new(x: DVector<f64>, p: DMatrix<f64>) -> Result<Self> {
        if p.nrows() != x.len() || p.ncols() != x.len() {
            return Err(Error::Dimension(format!(
                "P must be {n}x{n} to match the state, got {}x{}",
                p.nrows(),
                p.ncols(),
                n = x.len()
            )));
        }
        Ok(Self { x, p, step: 0 })
    }

    /// Default initialization: zero mean, `P₀ = I`.
    pub fn zeroed(dim: usize) -> Self {
        Self {
            x: DVector::zeros(dim),
            p: DMatrix::identity(dim, dim),
            step: 0,
        }
    }
}

/// Covariance update form used by [`kf_update_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateForm {
    /// `P = (I − K H) P⁻`, symmetrized.
    #[default]
    Standard,
    /// Joseph form `P = (I−KH) P⁻ (I−KH)ᵀ + K R Kᵀ`; slower, keeps PSD for
    /// ill-conditioned `R`.
    Joseph,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Time update: propagates mean and covariance through the transition model.
/// The step index is unchanged (prediction is pre-update).
pub fn kf_predict(state: &StateEstimate, model: &SystemModel) -> Result<StateEstimate> {
    if state.x.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "state dim {} does not match model dim {}",
            state.x.len(),
            model.state_dim()
        )));
    }
    let x_prior = model.transition(&state.x);
    let j = model.transition_jacobian(&state.x);
    let p_prior = symmetrize(&(&j * &state.p * j.transpose() + model.process_noise()));
    Ok(StateEstimate {
        x: x_prior,
        p: p_prior,
        step: state.step,
    })
}

/// Kalman gain `K = P⁻ Hᵀ (H P⁻ Hᵀ + R)⁻¹`.
pub fn kf_gain(p_prior: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = p_prior.nrows();
    if p_prior.ncols() != n {
        return Err(Error::Dimension("P⁻ must be square".into()));
    }
    if h.ncols() != n {
        return Err(Error::Dimension(format!(
            "H must have {n} columns, got {}",
            h.ncols()
        )));
    }
    if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
        return Err(Error::Dimension("R dimensions must match H rows".into()));
    }
    let s = h * p_prior * h.transpose() + r;
    let s_inv = s.clone().try_inverse().ok_or_else(|| {
        Error::Numerical("innovation covariance S = H P⁻ Hᵀ + R is singular".into())
    })?;
    Ok(p_prior * h.transpose() * s_inv)
}

/// Measurement update with selectable covariance form. Increments `step`.
pub fn kf_update_with(
    state_prior: &StateEstimate,
    z: &DVector<f64>,
    model: &SystemModel,
    form: UpdateForm,
) -> Result<StateEstimate> {
    if z.len() != model.obs_dim() {
        return Err(Error::Dimension(format!(
            "measurement dim {} does not match model obs dim {}",
            z.len(),
            model.obs_dim()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement rejected, prior kept".into()));
    }
    let h = model.observation_jacobian(&state_prior.x);
    let k = kf_gain(&state_prior.p, &h, model.measurement_noise())?;
    let innovation = z - model.observe(&state_prior.x);
    let x = &state_prior.x + &k * innovation;
    let n = state_prior.x.len();
    let i = DMatrix::<f64>::identity(n, n);
    let p = match form {
        UpdateForm::Standard => (&i - &k * &h) * &state_prior.p,
        UpdateForm::Joseph => {
            let ikh = &i - &k * &h;
            &ikh * &state_prior.p * ikh.transpose()
                + &k * model.measurement_noise() * k.transpose()
        }
    };
    Ok(StateEstimate {
        x,
        p: symmetrize(&p),
        step: state_prior.step + 1,
    })
}

/// Measurement update with the standard covariance form.
pub fn kf_update(
    state_prior: &StateEstimate,
    z: &DVector<f64>,
    model: &SystemModel,
) -> Result<StateEstimate> {
    kf_update_with(state_prior, z, model, UpdateForm::Standard)
}
