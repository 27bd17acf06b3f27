//! Gaussian-process regression surrogate for the reward function.
//!
//! This is the non-parametric baseline the bandit leans on when no filter
//! context is available: a squared-exponential GP with fixed hyperparameters,
//! refit from scratch on every observation set. The refit is deliberately not
//! amortized — its cubic cost is the complexity foil the cheaper filter-based
//! context is measured against.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter added to the gram diagonal before factorization.
const JITTER_SCALE: f64 = 1e-8;

/// Covariance function family. Only the squared exponential is implemented;
/// the enum keeps the kernel family explicit in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KernelKind {
    #[default]
    SquaredExponential,
}

/// Stationary kernel with fixed hyperparameters (no marginal-likelihood
/// optimization). Defaults: ℓ = 1, σ_f² = 1, σ_n² = 0.01.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    /// Lengthscale ℓ > 0.
    pub lengthscale: f64,
    /// Signal variance σ_f² > 0; the prior variance at any point.
    pub signal_variance: f64,
    /// Observation noise variance σ_n² ≥ 0.
    pub noise_variance: f64,
}

impl Default for Kernel {
    fn default() -> Self {
        Self {
            kind: KernelKind::SquaredExponential,
            lengthscale: 1.0,
            signal_variance: 1.0,
            noise_variance: 0.01,
        }
    }
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0) || !self.lengthscale.is_finite() {
            return Err(Error::Config(format!(
                "lengthscale {} must be a positive finite number",
                self.lengthscale
            )));
        }
        if !(self.signal_variance > 0.0) || !self.signal_variance.is_finite() {
            return Err(Error::Config(format!(
                "signal variance {} must be a positive finite number",
                self.signal_variance
            )));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return Err(Error::Config(format!(
                "noise variance {} must be a nonnegative finite number",
                self.noise_variance
            )));
        }
        Ok(())
    }

    /// k(a, b) = σ_f² · exp(−‖a − b‖² / (2ℓ²)).
    pub fn eval(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let d2 = (a - b).norm_squared();
        self.signal_variance * (-d2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }
}

/// Cheap health readout of the fitted gram factorization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GramDiagnostics {
    pub n: usize,
    pub jitter: f64,
    pub min_factor_diag: f64,
    pub max_factor_diag: f64,
    /// (max diag(L) / min diag(L))², a lower bound on the gram condition
    /// number.
    pub condition_estimate: f64,
}

/// Fitted GP. Immutable after [`gp_fit`]; fits for different bandit arms may
/// run concurrently.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: Kernel,
    inputs: Vec<DVector<f64>>,
    targets: Vec<f64>,
    /// Cholesky factor of K + σ_n²·I + jitter·I; `None` for the prior.
    factor: Option<Cholesky<f64, Dyn>>,
    /// (K + σ_n²·I + jitter·I)⁻¹ · y; empty for the prior.
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    /// Model with no observations; the posterior everywhere is the prior
    /// (0, σ_f²).
    pub fn prior(kernel: Kernel) -> Result<Self> {
        kernel.validate()?;
        Ok(Self {
            kernel,
            inputs: Vec::new(),
            targets: Vec::new(),
            factor: None,
            alpha: DVector::zeros(0),
            jitter: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn diagnostics(&self) -> GramDiagnostics {
        match &self.factor {
            None => GramDiagnostics {
                n: 0,
                jitter: 0.0,
                min_factor_diag: 1.0,
                max_factor_diag: 1.0,
                condition_estimate: 1.0,
            },
            Some(chol) => {
                let diag = chol.l_dirty().diagonal();
                let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                GramDiagnostics {
                    n: self.inputs.len(),
                    jitter: self.jitter,
                    min_factor_diag: min,
                    max_factor_diag: max,
                    condition_estimate: (max / min) * (max / min),
                }
            }
        }
    }
}

fn factorize(gram: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(gram).ok_or_else(|| {
        Error::Numerical("gram matrix is not positive definite after jitter".into())
    })
}

/// Fits a GP to the data from scratch (O(n³); intentionally no incremental
/// update). Empty data yields the prior model.
pub fn gp_fit(inputs: &[DVector<f64>], targets: &[f64], kernel: Kernel) -> Result<GpModel> {
    kernel.validate()?;
    if inputs.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if inputs.is_empty() {
        return GpModel::prior(kernel);
    }
    let dim = inputs[0].len();
    for (i, x) in inputs.iter().enumerate() {
        if x.len() != dim {
            return Err(Error::Dimension(format!(
                "input {i} has dim {}, expected {dim}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input {i} is not finite")));
        }
    }
    if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("target {i} is not finite")));
    }

    let n = inputs.len();
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let k = kernel.eval(&inputs[i], &inputs[j]);
            gram[(i, j)] = k;
            gram[(j, i)] = k;
        }
    }
    for i in 0..n {
        gram[(i, i)] += kernel.noise_variance;
    }
    let jitter = JITTER_SCALE * gram.diagonal().mean();
    for i in 0..n {
        gram[(i, i)] += jitter;
    }

    let factor = factorize(gram)?;
    let alpha = factor.solve(&DVector::from_column_slice(targets));
    Ok(GpModel {
        kernel,
        inputs: inputs.to_vec(),
        targets: targets.to_vec(),
        factor: Some(factor),
        alpha,
        jitter,
    })
}

/// Posterior predictive mean and variance of the latent function at `x`.
/// The variance is clipped at zero from below. Infallible: the prior model
/// returns (0, σ_f²), and a non-finite query propagates NaN rather than
/// erroring.
///
/// Panics if `x` does not match the training input dimension.
pub fn gp_posterior(model: &GpModel, x: &DVector<f64>) -> (f64, f64) {
    let prior_var = model.kernel.signal_variance;
    let factor = match &model.factor {
        None => return (0.0, prior_var),
        Some(f) => f,
    };
    assert_eq!(
        x.len(),
        model.inputs[0].len(),
        "query dimension must match training inputs"
    );
    let k_star = DVector::from_fn(model.inputs.len(), |i, _| {
        model.kernel.eval(&model.inputs[i], x)
    });
    let mean = k_star.dot(&model.alpha);
    let v = factor.solve(&k_star);
    let variance = (prior_var - k_star.dot(&v)).max(0.0);
    (mean, variance)
}
