//! State-space models for the extended Kalman filter.
//!
//! A [`SystemModel`] bundles the transition function `f`, the observation
//! function `h`, and the noise covariances `Q` (process) and `R`
//! (measurement):
//!
//! ```text
//!   x_k = f(x_{k-1}) + w_k,   w_k ~ N(0, Q)
//!   z_k = h(x_k)     + u_k,   u_k ~ N(0, R)
//! ```
//!
//! Linear models store `A` and `H` directly and the Jacobians are exact.
//! Nonlinear models take closures; Jacobians are either supplied analytically
//! or computed by central finite differences with step `1e-6 * (1 + |x_j|)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Closure type for nonlinear transition/observation functions.
pub type StateFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Closure type for analytic Jacobian providers.
pub type JacobianFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
enum Map {
    Linear(DMatrix<f64>),
    NonLinear {
        f: StateFn,
        jacobian: Option<JacobianFn>,
        out_dim: usize,
    },
}

impl Map {
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Map::Linear(m) => m * x,
            Map::NonLinear { f, .. } => f(x),
        }
    }

    fn jacobian_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Map::Linear(m) => m.clone(),
            Map::NonLinear { f, jacobian, out_dim } => match jacobian {
                Some(j) => j(x),
                None => central_difference_jacobian(f, x, *out_dim),
            },
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            Map::Linear(m) => m.nrows(),
            Map::NonLinear { out_dim, .. } => *out_dim,
        }
    }
}

/// Central finite-difference Jacobian with per-component step `1e-6 * (1 + |x_j|)`.
fn central_difference_jacobian(
    f: &StateFn,
    x: &DVector<f64>,
    out_dim: usize,
) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(out_dim, n);
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp);
        let fm = f(&xm);
        for i in 0..out_dim {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Transition/observation functions with their noise covariances.
#[derive(Clone)]
pub struct SystemModel {
    transition: Map,
    observation: Map,
    process_noise: DMatrix<f64>,
    measurement_noise: DMatrix<f64>,
}

impl std::fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemModel")
            .field("state_dim", &self.state_dim())
            .field("obs_dim", &self.obs_dim())
            .field(
                "linear",
                &matches!(
                    (&self.transition, &self.observation),
                    (Map::Linear(_), Map::Linear(_))
                ),
            )
            .field("q", &self.process_noise)
            .field("r", &self.measurement_noise)
            .finish()
    }
}

fn check_covariance(m: &DMatrix<f64>, dim: usize, name: &str) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::Dimension(format!(
            "{name} must be {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} contains non-finite entries")));
    }
    let sym_tol = 1e-9 * (1.0 + m.amax());
    if (m - m.transpose()).amax() > sym_tol {
        return Err(Error::Config(format!("{name} must be symmetric")));
    }
    let eigs = m.clone().symmetric_eigenvalues();
    if eigs.iter().any(|&e| e < -1e-9 * (1.0 + m.amax())) {
        return Err(Error::Config(format!("{name} must be positive semi-definite")));
    }
    Ok(())
}

impl SystemModel {
    /// Linear model `x_k = A x_{k-1} + w`, `z_k = H x_k + u`.
    pub fn linear(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || n == 0 {
            return Err(Error::Dimension("A must be square and non-empty".into()));
        }
        if h.ncols() != n || h.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "H must have {n} columns, got {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        check_covariance(&q, n, "Q")?;
        check_covariance(&r, h.nrows(), "R")?;
        Ok(Self {
            transition: Map::Linear(a),
            observation: Map::Linear(h),
            process_noise: q,
            measurement_noise: r,
        })
    }

    /// Nonlinear model from closures, with optional analytic Jacobians.
    ///
    /// When a Jacobian provider is `None` it falls back to central finite
    /// differences.
    #[allow(clippy::too_many_arguments)]
    pub fn nonlinear(
        transition: StateFn,
        transition_jacobian: Option<JacobianFn>,
        observation: StateFn,
        observation_jacobian: Option<JacobianFn>,
        state_dim: usize,
        obs_dim: usize,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        if state_dim == 0 || obs_dim == 0 {
            return Err(Error::Dimension("state and observation dims must be positive".into()));
        }
        check_covariance(&q, state_dim, "Q")?;
        check_covariance(&r, obs_dim, "R")?;
        Ok(Self {
            transition: Map::NonLinear {
                f: transition,
                jacobian: transition_jacobian,
                out_dim: state_dim,
            },
            observation: Map::NonLinear {
                f: observation,
                jacobian: observation_jacobian,
                out_dim: obs_dim,
            },
            process_noise: q,
            measurement_noise: r,
        })
    }

    /// Scalar random-walk model: `A = H = 1` with the given noise variances.
    pub fn scalar_random_walk(q: f64, r: f64) -> Result<Self> {
        Self::linear(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.transition.out_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.observation.out_dim()
    }

    pub fn transition(&self, x: &DVector<f64>) -> DVector<f64> {
        self.transition.apply(x)
    }

    pub fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        self.observation.apply(x)
    }

    /// Transition Jacobian `J_t` evaluated at `x`.
    pub fn transition_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.transition.jacobian_at(x)
    }

    /// Observation Jacobian `H_t` evaluated at `x`.
    pub fn observation_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.observation.jacobian_at(x)
    }

    pub fn process_noise(&self) -> &DMatrix<f64> {
        &self.process_noise
    }

    pub fn measurement_noise(&self) -> &DMatrix<f64> {
        &self.measurement_noise
    }

    /// Replaces both noise covariances, revalidating symmetry/PSD.
    pub fn set_noise(&mut self, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<()> {
        check_covariance(&q, self.state_dim(), "Q")?;
        check_covariance(&r, self.obs_dim(), "R")?;
        self.process_noise = q;
        self.measurement_noise = r;
        Ok(())
    }
}
