//! Stacked LSTM that maps a measurement window to EKF noise covariances.
//!
//! The final hidden state feeds a fully connected head emitting raw values
//! for the diagonals of R (measurement noise) and Q (process noise); a
//! softplus keeps both positive for any raw input. Gates use the standard
//! cell:
//!
//! ```text
//!   i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
//!   g = tanh(W_g x + U_g h + b_g) o = σ(W_o x + U_o h + b_o)
//!   c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
//! ```
//!
//! Gradients come from full backpropagation through time; correctness is
//! pinned by a central-finite-difference check in the tests.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// What the network consumes per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum LstmInput {
    /// Raw measurement vectors.
    #[default]
    Raw,
    /// EKF innovations `z − H·x̂⁻` computed with the model's configured noise.
    Innovations,
}

/// Network and training hyperparameters. Defaults: sequence length 10,
/// batch 16, learning rate 0.001, 2 hidden layers of 64 units, 30 epochs,
/// Adam (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LstmConfig {
    pub seq_len: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub hidden_layers: usize,
    pub hidden_size: usize,
    pub epochs: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub input_kind: LstmInput,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            seq_len: 10,
            batch: 16,
            learning_rate: 0.001,
            hidden_layers: 2,
            hidden_size: 64,
            epochs: 30,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            input_kind: LstmInput::Raw,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch == 0 || self.hidden_layers == 0 || self.hidden_size == 0
        {
            return Err(Error::Config("LSTM counts must be ≥ 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam parameters out of range".into()));
        }
        Ok(())
    }
}

/// Numerically stable softplus `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Softplus derivative (the logistic function).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Diagonal noise covariances with the raw pre-softplus values that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEstimate {
    /// Measurement noise R, diagonal PSD.
    pub r: DMatrix<f64>,
    /// Process noise Q, diagonal PSD.
    pub q: DMatrix<f64>,
    /// Unconstrained head outputs, R entries first then Q entries.
    pub raw: DVector<f64>,
}

impl NoiseEstimate {
    /// Applies softplus to raw head outputs: first `obs_dim` entries form
    /// diag(R), the remaining `state_dim` form diag(Q).
    pub fn from_raw(raw: DVector<f64>, obs_dim: usize, state_dim: usize) -> Result<Self> {
        if raw.len() != obs_dim + state_dim {
            return Err(Error::Dimension(format!(
                "raw noise vector length {} != obs {obs_dim} + state {state_dim}",
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw noise parameters".into()));
        }
        let r = DMatrix::from_diagonal(&DVector::from_fn(obs_dim, |i, _| softplus(raw[i])));
        let q = DMatrix::from_diagonal(&DVector::from_fn(state_dim, |i, _| {
            softplus(raw[obs_dim + i])
        }));
        Ok(Self { r, q, raw })
    }

    /// Noise estimate representing explicit diagonal values (raw entries are
    /// the softplus preimages).
    pub fn from_diagonals(r_diag: &[f64], q_diag: &[f64]) -> Result<Self> {
        let inv_softplus = |y: f64| -> Result<f64> {
            if y <= 0.0 {
                return Err(Error::Config(format!(
                    "noise diagonal entry {y} must be positive"
                )));
            }
            // softplus⁻¹(y) = ln(eʸ − 1), stable for large y as y + ln(1 − e⁻ʸ).
            Ok(y + (-(-y).exp()).ln_1p())
        };
        let mut raw = Vec::with_capacity(r_diag.len() + q_diag.len());
        for v in r_diag.iter().chain(q_diag) {
            raw.push(inv_softplus(*v)?);
        }
        Self::from_raw(DVector::from_vec(raw), r_diag.len(), q_diag.len())
    }
}

/// One LSTM layer's weights; gate rows stacked in [i, f, g, o] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// Input weights, 4·hidden × in_dim.
    pub w: DMatrix<f64>,
    /// Recurrent weights, 4·hidden × hidden.
    pub u: DMatrix<f64>,
    /// Gate biases, 4·hidden.
    pub b: DVector<f64>,
}

/// Full parameter set: stacked layers plus the fully connected head.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub layers: Vec<LstmLayer>,
    /// Head weights, (obs_dim + state_dim) × hidden.
    pub w_head: DMatrix<f64>,
    pub b_head: DVector<f64>,
    pub input_dim: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
}

impl LstmParams {
    /// All-zero parameters (the head then emits softplus(0) noise scales).
    pub fn zeros(cfg: &LstmConfig, input_dim: usize, obs_dim: usize, state_dim: usize) -> Self {
        let nh = cfg.hidden_size;
        let layers = (0..cfg.hidden_layers)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { nh };
                LstmLayer {
                    w: DMatrix::zeros(4 * nh, in_dim),
                    u: DMatrix::zeros(4 * nh, nh),
                    b: DVector::zeros(4 * nh),
                }
            })
            .collect();
        Self {
            layers,
            w_head: DMatrix::zeros(obs_dim + state_dim, nh),
            b_head: DVector::zeros(obs_dim + state_dim),
            input_dim,
            obs_dim,
            state_dim,
        }
    }

    /// Xavier-initialized parameters with forget-gate bias 1 (keeps early
    /// gradients flowing through the cell state).
    pub fn random(
        cfg: &LstmConfig,
        input_dim: usize,
        obs_dim: usize,
        state_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nh = cfg.hidden_size;
        let mut xavier = |rows: usize, cols: usize| {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-s..s))
        };
        let mut layers = Vec::with_capacity(cfg.hidden_layers);
        for l in 0..cfg.hidden_layers {
            let in_dim = if l == 0 { input_dim } else { nh };
            let w = xavier(4 * nh, in_dim);
            let u = xavier(4 * nh, nh);
            let mut b = DVector::zeros(4 * nh);
            for j in nh..2 * nh {
                b[j] = 1.0;
            }
            layers.push(LstmLayer { w, u, b });
        }
        let w_head = xavier(obs_dim + state_dim, nh);
        Self {
            layers,
            w_head,
            b_head: DVector::zeros(obs_dim + state_dim),
            input_dim,
            obs_dim,
            state_dim,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].u.ncols()
    }

    pub(crate) fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.u.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.w_head.iter());
        out.extend(self.b_head.iter());
        out
    }

    pub(crate) fn unflatten(&mut self, flat: &[f64]) {
        let mut pos = 0;
        let mut take = |target: &mut [f64]| {
            target.copy_from_slice(&flat[pos..pos + target.len()]);
            pos += target.len();
        };
        for l in &mut self.layers {
            take(l.w.as_mut_slice());
            take(l.u.as_mut_slice());
            take(l.b.as_mut_slice());
        }
        take(self.w_head.as_mut_slice());
        take(self.b_head.as_mut_slice());
        debug_assert_eq!(pos, flat.len());
    }
}

/// Parameter-shaped gradients.
#[derive(Debug, Clone)]
pub(crate) struct LstmGrads {
    pub layers: Vec<LstmLayer>,
    pub w_head: DMatrix<f64>,
    pub b_head: DVector<f64>,
}

impl LstmGrads {
    pub fn zeros_like(p: &LstmParams) -> Self {
        Self {
            layers: p
                .layers
                .iter()
                .map(|l| LstmLayer {
                    w: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
                    u: DMatrix::zeros(l.u.nrows(), l.u.ncols()),
                    b: DVector::zeros(l.b.len()),
                })
                .collect(),
            w_head: DMatrix::zeros(p.w_head.nrows(), p.w_head.ncols()),
            b_head: DVector::zeros(p.b_head.len()),
        }
    }

    pub fn accumulate(&mut self, other: &LstmGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.u += &b.u;
            a.b += &b.b;
        }
        self.w_head += &other.w_head;
        self.b_head += &other.b_head;
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.u.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.w_head.iter());
        out.extend(self.b_head.iter());
        out
    }
}

struct CellCache {
    x: DVector<f64>,
    h_prev: DVector<f64>,
    c_prev: DVector<f64>,
    i: DVector<f64>,
    f: DVector<f64>,
    g: DVector<f64>,
    o: DVector<f64>,
    c: DVector<f64>,
    tanh_c: DVector<f64>,
}

pub(crate) struct SeqCache {
    layers: Vec<Vec<CellCache>>,
    h_final: DVector<f64>,
    pub raw: DVector<f64>,
}

fn cell_forward(layer: &LstmLayer, x: &DVector<f64>, h: &DVector<f64>, c: &DVector<f64>) -> CellCache {
    let nh = h.len();
    let pre = &layer.w * x + &layer.u * h + &layer.b;
    let i = DVector::from_fn(nh, |j, _| sigmoid(pre[j]));
    let f = DVector::from_fn(nh, |j, _| sigmoid(pre[nh + j]));
    let g = DVector::from_fn(nh, |j, _| pre[2 * nh + j].tanh());
    let o = DVector::from_fn(nh, |j, _| sigmoid(pre[3 * nh + j]));
    let c_new = f.component_mul(c) + i.component_mul(&g);
    let tanh_c = c_new.map(|v| v.tanh());
    CellCache {
        x: x.clone(),
        h_prev: h.clone(),
        c_prev: c.clone(),
        i,
        f,
        g,
        o,
        c: c_new,
        tanh_c,
    }
}

/// Forward pass over a whole sequence, keeping activations for BPTT.
pub(crate) fn forward_seq(params: &LstmParams, sequence: &[DVector<f64>]) -> Result<SeqCache> {
    if sequence.is_empty() {
        return Err(Error::Empty("LSTM input sequence is empty".into()));
    }
    if sequence.iter().any(|x| x.len() != params.input_dim) {
        return Err(Error::Dimension(format!(
            "sequence entries must have dim {}",
            params.input_dim
        )));
    }
    let nh = params.hidden_size();
    let mut layer_caches: Vec<Vec<CellCache>> = Vec::with_capacity(params.layers.len());
    let mut inputs: Vec<DVector<f64>> = sequence.to_vec();
    for (li, layer) in params.layers.iter().enumerate() {
        let mut h = DVector::zeros(nh);
        let mut c = DVector::zeros(nh);
        let mut caches = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());
        for (t, x) in inputs.iter().enumerate() {
            let cache = cell_forward(layer, x, &h, &c);
            h = cache.o.component_mul(&cache.tanh_c);
            c = cache.c.clone();
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "LSTM activations diverged at layer {li}, step {t}"
                )));
            }
            outputs.push(h.clone());
            caches.push(cache);
        }
        layer_caches.push(caches);
        inputs = outputs;
    }
    let h_final = inputs.last().unwrap().clone();
    let raw = &params.w_head * &h_final + &params.b_head;
    Ok(SeqCache {
        layers: layer_caches,
        h_final,
        raw,
    })
}

/// Backward pass: gradient of a loss on the raw head output, through the head
/// and every timestep of every layer.
pub(crate) fn backward_seq(
    params: &LstmParams,
    cache: &SeqCache,
    d_raw: &DVector<f64>,
) -> LstmGrads {
    let nh = params.hidden_size();
    let steps = cache.layers[0].len();
    let mut grads = LstmGrads::zeros_like(params);

    grads.w_head += d_raw * cache.h_final.transpose();
    grads.b_head += d_raw;

    // Upstream gradient on each layer's output sequence; only the final
    // hidden state of the top layer is observed by the head.
    let mut dh_seq: Vec<DVector<f64>> = vec![DVector::zeros(nh); steps];
    dh_seq[steps - 1] = params.w_head.transpose() * d_raw;

    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let caches = &cache.layers[li];
        let lg = &mut grads.layers[li];
        let in_dim = layer.w.ncols();
        let mut dx_seq: Vec<DVector<f64>> = vec![DVector::zeros(in_dim); steps];
        let mut dh_carry = DVector::zeros(nh);
        let mut dc_carry = DVector::zeros(nh);
        for t in (0..steps).rev() {
            let cc = &caches[t];
            let dh = &dh_seq[t] + &dh_carry;
            let d_o = dh.component_mul(&cc.tanh_c);
            let dc = &dc_carry
                + dh
                    .component_mul(&cc.o)
                    .component_mul(&cc.tanh_c.map(|v| 1.0 - v * v));
            let d_i = dc.component_mul(&cc.g);
            let d_g = dc.component_mul(&cc.i);
            let d_f = dc.component_mul(&cc.c_prev);
            dc_carry = dc.component_mul(&cc.f);

            // Pre-activation gradients, stacked [i, f, g, o].
            let mut dz = DVector::zeros(4 * nh);
            for j in 0..nh {
                dz[j] = d_i[j] * cc.i[j] * (1.0 - cc.i[j]);
                dz[nh + j] = d_f[j] * cc.f[j] * (1.0 - cc.f[j]);
                dz[2 * nh + j] = d_g[j] * (1.0 - cc.g[j] * cc.g[j]);
                dz[3 * nh + j] = d_o[j] * cc.o[j] * (1.0 - cc.o[j]);
            }
            lg.w += &dz * cc.x.transpose();
            lg.u += &dz * cc.h_prev.transpose();
            lg.b += &dz;
            dx_seq[t] = layer.w.transpose() * &dz;
            dh_carry = layer.u.transpose() * &dz;
        }
        dh_seq = dx_seq;
    }
    grads
}

/// Runs the network over one window and returns the noise estimate. The
/// sequence length must equal the configured `seq_len`; inference is
/// deterministic.
pub fn lstm_forward(
    sequence: &[DVector<f64>],
    cfg: &LstmConfig,
    params: &LstmParams,
) -> Result<NoiseEstimate> {
    cfg.validate()?;
    if sequence.len() != cfg.seq_len {
        return Err(Error::Dimension(format!(
            "sequence length {} != configured seq_len {}",
            sequence.len(),
            cfg.seq_len
        )));
    }
    let cache = forward_seq(params, sequence)?;
    NoiseEstimate::from_raw(cache.raw, params.obs_dim, params.state_dim)
}
