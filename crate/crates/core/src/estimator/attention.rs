//! Multi-head self-attention network used as a measurement smoother.
//!
//! Per layer, tokens X (one row per window entry) pass through scaled
//! dot-product attention and a position-wise feed-forward block:
//!
//! ```text
//!   Y = concat_i( softmax(Q_i·K_iᵀ / √d_h)·V_i ) · W_o
//!   Z = Y + relu(Y·W₁ + b₁)·W₂ + b₂
//! ```
//!
//! The attention sub-block carries no residual or normalization, so the
//! network output is always a convex mixture of (projected) inputs before the
//! feed-forward correction. With identity value/output projections and zero
//! feed-forward weights the whole stack is an exact pass-through: a
//! single-token window (softmax of one logit = 1) or a constant window comes
//! back unchanged. An encoder maps raw measurement vectors into model space;
//! the decoder reads the final token back out.
//!
//! Training is self-supervised next-measurement prediction with squared
//! error, manual backpropagation, and Adam updates. Dropout (attention
//! probabilities and feed-forward activations) applies during training only.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

use super::window::MeasurementWindow;

/// Attention stack hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    /// Dimension of raw measurement vectors fed to the encoder.
    pub input_dim: usize,
    /// Number of stacked attention layers `L`.
    pub layers: usize,
    /// Attention heads `h` per layer.
    pub heads: usize,
    /// Token embedding width `d`.
    pub model_dim: usize,
    /// Total attention width `d_k = d_v` split across heads.
    pub attn_dim: usize,
    /// Feed-forward width as a multiple of `model_dim`.
    pub ff_multiplier: usize,
    /// Dropout probability during training (attention rows and FF activations).
    pub dropout: f64,
}

impl AttentionConfig {
    /// Small configuration trainable in test budgets: L=2, d=16, h=2,
    /// no dropout.
    pub fn desk_scale(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: 2,
            heads: 2,
            model_dim: 16,
            attn_dim: 16,
            ff_multiplier: 4,
            dropout: 0.0,
        }
    }

    /// Full-scale configuration: L=4, d=256, h=4, d_ff=4·d, dropout 0.25.
    pub fn paper_scale(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: 4,
            heads: 4,
            model_dim: 256,
            attn_dim: 256,
            ff_multiplier: 4,
            dropout: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.model_dim == 0
            || self.attn_dim == 0
            || self.ff_multiplier == 0
        {
            return Err(Error::Config("attention dimensions must be ≥ 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.attn_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attn_dim {} must be divisible by heads {}",
                self.attn_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} must lie in [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.attn_dim / self.heads
    }

    fn ff_dim(&self) -> usize {
        self.ff_multiplier * self.model_dim
    }
}

/// Per-layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: DMatrix<f64>, // d × a
    pub wk: DMatrix<f64>, // d × a
    pub wv: DMatrix<f64>, // d × a
    pub wo: DMatrix<f64>, // a × d
    pub w1: DMatrix<f64>, // d × f
    pub b1: DVector<f64>, // f
    pub w2: DMatrix<f64>, // f × d
    pub b2: DVector<f64>, // d
}

/// Full parameter set: encoder, layers, decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_in: DMatrix<f64>,  // d_in × d
    pub b_in: DVector<f64>,  // d
    pub layers: Vec<LayerParams>,
    pub w_out: DMatrix<f64>, // d × d_in
    pub b_out: DVector<f64>, // d_in
}

/// Attention smoother: configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNetwork {
    pub cfg: AttentionConfig,
    pub params: AttentionParams,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-s..s))
}

impl AttentionNetwork {
    /// Xavier-initialized network.
    pub fn random(cfg: AttentionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_in, d, a, f) = (cfg.input_dim, cfg.model_dim, cfg.attn_dim, cfg.ff_dim());
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: xavier(d, a, &mut rng),
                wk: xavier(d, a, &mut rng),
                wv: xavier(d, a, &mut rng),
                wo: xavier(a, d, &mut rng),
                w1: xavier(d, f, &mut rng),
                b1: DVector::zeros(f),
                w2: xavier(f, d, &mut rng),
                b2: DVector::zeros(d),
            })
            .collect();
        Ok(Self {
            params: AttentionParams {
                w_in: xavier(d_in, d, &mut rng),
                b_in: DVector::zeros(d),
                layers,
                w_out: xavier(d, d_in, &mut rng),
                b_out: DVector::zeros(d_in),
            },
            cfg,
        })
    }

    /// Identity-projection network: encoder/decoder and value/output
    /// projections are identity, query/key and feed-forward weights zero.
    /// Attention degenerates to a uniform mixture of tokens, so constant or
    /// single-token windows pass through exactly. Requires
    /// `input_dim == model_dim == attn_dim`.
    pub fn identity_projection(cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.input_dim != cfg.model_dim || cfg.attn_dim != cfg.model_dim {
            return Err(Error::Config(
                "identity projections need input_dim == model_dim == attn_dim".into(),
            ));
        }
        let (d, a, f) = (cfg.model_dim, cfg.attn_dim, cfg.ff_dim());
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: DMatrix::zeros(d, a),
                wk: DMatrix::zeros(d, a),
                wv: DMatrix::identity(d, a),
                wo: DMatrix::identity(a, d),
                w1: DMatrix::zeros(d, f),
                b1: DVector::zeros(f),
                w2: DMatrix::zeros(f, d),
                b2: DVector::zeros(d),
            })
            .collect();
        Ok(Self {
            params: AttentionParams {
                w_in: DMatrix::identity(cfg.input_dim, d),
                b_in: DVector::zeros(d),
                layers,
                w_out: DMatrix::identity(d, cfg.input_dim),
                b_out: DVector::zeros(cfg.input_dim),
            },
            cfg,
        })
    }

    /// Inference forward pass: returns the decoded final token.
    pub fn forward(&self, tokens: &[DVector<f64>]) -> Result<DVector<f64>> {
        let (out, _) = self.forward_full(tokens, None)?;
        Ok(out)
    }

    /// Forward pass also returning per-layer, per-head attention maps
    /// (rows are probability distributions over tokens).
    pub fn forward_with_maps(
        &self,
        tokens: &[DVector<f64>],
    ) -> Result<(DVector<f64>, Vec<Vec<DMatrix<f64>>>)> {
        let (out, cache) = self.forward_full(tokens, None)?;
        let maps = cache.layers.into_iter().map(|l| l.attn).collect();
        Ok((out, maps))
    }

    /// Full forward with activation caches; `dropout_rng` enables training
    /// dropout with the configured probability.
    fn forward_full(
        &self,
        tokens: &[DVector<f64>],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(DVector<f64>, ForwardCache)> {
        if tokens.is_empty() {
            return Err(Error::Empty("attention input window is empty".into()));
        }
        let d_in = self.cfg.input_dim;
        if tokens.iter().any(|t| t.len() != d_in) {
            return Err(Error::Config(format!(
                "token dim {} does not match trained input dim {d_in}",
                tokens[0].len()
            )));
        }
        let m = tokens.len();
        let mut raw = DMatrix::zeros(m, d_in);
        for (i, t) in tokens.iter().enumerate() {
            raw.set_row(i, &t.transpose());
        }

        // Encoder.
        let mut x = &raw * &self.params.w_in;
        add_row_bias(&mut x, &self.params.b_in);

        let mut layer_caches = Vec::with_capacity(self.cfg.layers);
        for layer in &self.params.layers {
            let (z, cache) = self.layer_forward(layer, &x, dropout_rng.as_deref_mut());
            layer_caches.push(cache);
            x = z;
        }

        // Decoder on the final token.
        let z_last: DVector<f64> = x.row(m - 1).transpose();
        let out = self.params.w_out.transpose() * &z_last + &self.params.b_out;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention output is non-finite".into()));
        }
        Ok((
            out,
            ForwardCache {
                raw,
                layers: layer_caches,
                z_last,
            },
        ))
    }

    fn layer_forward(
        &self,
        p: &LayerParams,
        x: &DMatrix<f64>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (DMatrix<f64>, LayerCache) {
        let m = x.nrows();
        let (h, ah, d) = (self.cfg.heads, self.cfg.head_dim(), self.cfg.model_dim);
        let q = x * &p.wq;
        let k = x * &p.wk;
        let v = x * &p.wv;

        let mut attn = Vec::with_capacity(h);
        let mut attn_used = Vec::with_capacity(h);
        let mut attn_masks = Vec::with_capacity(h);
        let mut h_cat = DMatrix::zeros(m, self.cfg.attn_dim);
        for i in 0..h {
            let qi = q.columns(i * ah, ah);
            let ki = k.columns(i * ah, ah);
            let vi = v.columns(i * ah, ah);
            let scores = (qi * ki.transpose()) / (ah as f64).sqrt();
            let a = softmax_rows(&scores);
            let (a_used, mask) = self.apply_dropout(&a, dropout_rng.as_deref_mut());
            h_cat.view_mut((0, i * ah), (m, ah)).copy_from(&(&a_used * vi));
            attn.push(a);
            attn_used.push(a_used);
            attn_masks.push(mask);
        }
        let y = &h_cat * &p.wo;

        let mut u = &y * &p.w1;
        add_row_bias(&mut u, &p.b1);
        let r = u.map(|v| v.max(0.0));
        let (r_used, ff_mask) = self.apply_dropout(&r, dropout_rng);
        let mut z = &r_used * &p.w2;
        add_row_bias(&mut z, &p.b2);
        z += &y;

        debug_assert_eq!(z.ncols(), d);
        (
            z,
            LayerCache {
                x: x.clone(),
                q,
                k,
                v,
                attn,
                attn_used,
                attn_masks,
                h_cat,
                y,
                u,
                r_used,
                ff_mask,
            },
        )
    }

    /// Inverted dropout: scales kept entries by 1/keep so inference needs no
    /// rescaling. Identity when no RNG is supplied or dropout is 0.
    fn apply_dropout(
        &self,
        a: &DMatrix<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        match rng {
            Some(rng) if self.cfg.dropout > 0.0 => {
                let keep = 1.0 - self.cfg.dropout;
                let mask =
                    DMatrix::from_fn(
                        a.nrows(),
                        a.ncols(),
                        |_, _| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        },
                    );
                (a.component_mul(&mask), Some(mask))
            }
            _ => (a.clone(), None),
        }
    }

    /// Backward pass from `d_out` (gradient of the loss w.r.t. the decoded
    /// output) through the cached forward activations.
    fn backward(&self, cache: &ForwardCache, d_out: &DVector<f64>) -> AttentionGrads {
        let m = cache.raw.nrows();
        let (h, ah) = (self.cfg.heads, self.cfg.head_dim());

        let mut grads = AttentionGrads::zeros(&self.cfg);

        // Decoder.
        grads.w_out += &cache.z_last * d_out.transpose();
        grads.b_out += d_out;
        let dz_last = &self.params.w_out * d_out;

        // Only the final token receives gradient from the decoder; attention
        // spreads it to the rest on the way down.
        let mut dx = DMatrix::zeros(m, self.cfg.model_dim);
        dx.set_row(m - 1, &dz_last.transpose());

        for idx in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[idx];
            let lc = &cache.layers[idx];
            let lg = &mut grads.layers[idx];

            // Feed-forward with residual: Z = Y + R_used·W2 + b2.
            let dz = dx;
            let mut dy = dz.clone();
            lg.w2 += lc.r_used.transpose() * &dz;
            add_col_sums(&mut lg.b2, &dz);
            let mut dr = &dz * layer.w2.transpose();
            if let Some(mask) = &lc.ff_mask {
                dr.component_mul_assign(mask);
            }
            let du = dr.zip_map(&lc.u, |g, u| if u > 0.0 { g } else { 0.0 });
            lg.w1 += lc.y.transpose() * &du;
            add_col_sums(&mut lg.b1, &du);
            dy += &du * layer.w1.transpose();

            // Attention: Y = H·Wo.
            lg.wo += lc.h_cat.transpose() * &dy;
            let dh = &dy * layer.wo.transpose();

            let mut dq = DMatrix::zeros(m, self.cfg.attn_dim);
            let mut dk = DMatrix::zeros(m, self.cfg.attn_dim);
            let mut dv = DMatrix::zeros(m, self.cfg.attn_dim);
            for i in 0..h {
                let dh_i = dh.columns(i * ah, ah);
                let vi = lc.v.columns(i * ah, ah);
                let mut da = &dh_i * vi.transpose();
                dv.view_mut((0, i * ah), (m, ah))
                    .copy_from(&(lc.attn_used[i].transpose() * dh_i));
                if let Some(mask) = &lc.attn_masks[i] {
                    da.component_mul_assign(mask);
                }
                let ds = softmax_rows_backward(&lc.attn[i], &da) / (ah as f64).sqrt();
                let qi = lc.q.columns(i * ah, ah);
                let ki = lc.k.columns(i * ah, ah);
                dq.view_mut((0, i * ah), (m, ah)).copy_from(&(&ds * ki));
                dk.view_mut((0, i * ah), (m, ah))
                    .copy_from(&(ds.transpose() * qi));
            }
            lg.wq += lc.x.transpose() * &dq;
            lg.wk += lc.x.transpose() * &dk;
            lg.wv += lc.x.transpose() * &dv;
            dx = &dq * layer.wq.transpose()
                + &dk * layer.wk.transpose()
                + &dv * layer.wv.transpose();
        }

        // Encoder.
        grads.w_in += cache.raw.transpose() * &dx;
        add_col_sums(&mut grads.b_in, &dx);
        grads
    }
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut row in m.row_iter_mut() {
        row += b.transpose();
    }
}

fn add_col_sums(acc: &mut DVector<f64>, m: &DMatrix<f64>) {
    for row in m.row_iter() {
        *acc += row.transpose();
    }
}

fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row /= sum;
    }
    out
}

/// Row-wise softmax Jacobian product: dS = A ⊙ (dA − rowsum(dA ⊙ A)).
fn softmax_rows_backward(a: &DMatrix<f64>, da: &DMatrix<f64>) -> DMatrix<f64> {
    let mut ds = DMatrix::zeros(a.nrows(), a.ncols());
    for i in 0..a.nrows() {
        let dot: f64 = (0..a.ncols()).map(|j| da[(i, j)] * a[(i, j)]).sum();
        for j in 0..a.ncols() {
            ds[(i, j)] = a[(i, j)] * (da[(i, j)] - dot);
        }
    }
    ds
}

struct LayerCache {
    x: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Post-softmax attention, one m×m map per head.
    attn: Vec<DMatrix<f64>>,
    /// Attention after dropout (equal to `attn` at inference).
    attn_used: Vec<DMatrix<f64>>,
    attn_masks: Vec<Option<DMatrix<f64>>>,
    h_cat: DMatrix<f64>,
    y: DMatrix<f64>,
    u: DMatrix<f64>,
    r_used: DMatrix<f64>,
    ff_mask: Option<DMatrix<f64>>,
}

struct ForwardCache {
    raw: DMatrix<f64>,
    layers: Vec<LayerCache>,
    z_last: DVector<f64>,
}

/// Parameter-shaped gradient accumulator.
struct AttentionGrads {
    w_in: DMatrix<f64>,
    b_in: DVector<f64>,
    layers: Vec<LayerGrads>,
    w_out: DMatrix<f64>,
    b_out: DVector<f64>,
}

struct LayerGrads {
    wq: DMatrix<f64>,
    wk: DMatrix<f64>,
    wv: DMatrix<f64>,
    wo: DMatrix<f64>,
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl AttentionGrads {
    fn zeros(cfg: &AttentionConfig) -> Self {
        let (d_in, d, a, f) = (cfg.input_dim, cfg.model_dim, cfg.attn_dim, cfg.ff_dim());
        Self {
            w_in: DMatrix::zeros(d_in, d),
            b_in: DVector::zeros(d),
            layers: (0..cfg.layers)
                .map(|_| LayerGrads {
                    wq: DMatrix::zeros(d, a),
                    wk: DMatrix::zeros(d, a),
                    wv: DMatrix::zeros(d, a),
                    wo: DMatrix::zeros(a, d),
                    w1: DMatrix::zeros(d, f),
                    b1: DVector::zeros(f),
                    w2: DMatrix::zeros(f, d),
                    b2: DVector::zeros(d),
                })
                .collect(),
            w_out: DMatrix::zeros(d, d_in),
            b_out: DVector::zeros(d_in),
        }
    }
}

impl AttentionParams {
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w_in.iter());
        out.extend(self.b_in.iter());
        for l in &self.layers {
            out.extend(l.wq.iter());
            out.extend(l.wk.iter());
            out.extend(l.wv.iter());
            out.extend(l.wo.iter());
            out.extend(l.w1.iter());
            out.extend(l.b1.iter());
            out.extend(l.w2.iter());
            out.extend(l.b2.iter());
        }
        out.extend(self.w_out.iter());
        out.extend(self.b_out.iter());
        out
    }

    fn unflatten(&mut self, flat: &[f64]) {
        let mut pos = 0;
        let mut take = |target: &mut [f64]| {
            target.copy_from_slice(&flat[pos..pos + target.len()]);
            pos += target.len();
        };
        take(self.w_in.as_mut_slice());
        take(self.b_in.as_mut_slice());
        for l in &mut self.layers {
            take(l.wq.as_mut_slice());
            take(l.wk.as_mut_slice());
            take(l.wv.as_mut_slice());
            take(l.wo.as_mut_slice());
            take(l.w1.as_mut_slice());
            take(l.b1.as_mut_slice());
            take(l.w2.as_mut_slice());
            take(l.b2.as_mut_slice());
        }
        take(self.w_out.as_mut_slice());
        take(self.b_out.as_mut_slice());
        debug_assert_eq!(pos, flat.len());
    }
}

impl AttentionGrads {
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w_in.iter());
        out.extend(self.b_in.iter());
        for l in &self.layers {
            out.extend(l.wq.iter());
            out.extend(l.wk.iter());
            out.extend(l.wv.iter());
            out.extend(l.wo.iter());
            out.extend(l.w1.iter());
            out.extend(l.b1.iter());
            out.extend(l.w2.iter());
            out.extend(l.b2.iter());
        }
        out.extend(self.w_out.iter());
        out.extend(self.b_out.iter());
        out
    }

    fn accumulate(&mut self, other: &AttentionGrads) {
        self.w_in += &other.w_in;
        self.b_in += &other.b_in;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.wq += &b.wq;
            a.wk += &b.wk;
            a.wv += &b.wv;
            a.wo += &b.wo;
            a.w1 += &b.w1;
            a.b1 += &b.b1;
            a.w2 += &b.w2;
            a.b2 += &b.b2;
        }
        self.w_out += &other.w_out;
        self.b_out += &other.b_out;
    }

    fn scale(&mut self, s: f64) {
        self.w_in *= s;
        self.b_in *= s;
        for l in &mut self.layers {
            l.wq *= s;
            l.wk *= s;
            l.wv *= s;
            l.wo *= s;
            l.w1 *= s;
            l.b1 *= s;
            l.w2 *= s;
            l.b2 *= s;
        }
        self.w_out *= s;
        self.b_out *= s;
    }
}

/// Denoises the most recent measurement: the window entries become attention
/// tokens (typically already PCA-projected) and the decoded final token is
/// returned. See [`super::pipeline::ksurf_step`] for the full pipeline.
pub fn attention_filter(
    window: &MeasurementWindow,
    net: &AttentionNetwork,
) -> Result<DVector<f64>> {
    if window.is_empty() {
        return Err(Error::Empty("attention input window is empty".into()));
    }
    net.forward(&window.to_vec())
}

/// Training options for [`train_attention`].
#[derive(Debug, Clone)]
pub struct AttentionTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub window: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for AttentionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 16,
            window: 8,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Self-supervised training: each window of `cfg.window` consecutive vectors
/// predicts the vector that follows it, with squared-error loss. Returns the
/// mean per-sample loss for each epoch.
pub fn train_attention(
    net: &mut AttentionNetwork,
    series: &[DVector<f64>],
    cfg: &AttentionTrainConfig,
) -> Result<Vec<f64>> {
    if cfg.window == 0 || cfg.batch == 0 {
        return Err(Error::Config("window and batch must be ≥ 1".into()));
    }
    if series.len() <= cfg.window {
        return Err(Error::Config(format!(
            "series length {} leaves no training pairs for window {}",
            series.len(),
            cfg.window
        )));
    }
    let n_pairs = series.len() - cfg.window;
    let mut flat = net.params.flatten();
    let mut adam = Adam::new(cfg.adam.clone(), flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut batch_grads = AttentionGrads::zeros(&net.cfg);
            let mut batch_loss = 0.0;
            for &start in chunk {
                let tokens = &series[start..start + cfg.window];
                let target = &series[start + cfg.window];
                let (pred, cache) = net.forward_full(tokens, Some(&mut rng))?;
                let err = &pred - target;
                batch_loss += err.norm_squared();
                // d‖e‖²/dpred = 2e.
                let g = net.backward(&cache, &(2.0 * err));
                batch_grads.accumulate(&g);
            }
            let inv = 1.0 / chunk.len() as f64;
            batch_grads.scale(inv);
            epoch_loss += batch_loss;
            adam.step(&mut flat, &batch_grads.flatten());
            net.params.unflatten(&flat);
        }
        let mean_loss = epoch_loss / n_pairs as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged(
                "attention training loss is non-finite".into(),
            ));
        }
        epoch_losses.push(mean_loss);
    }
    Ok(epoch_losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_cfg() -> AttentionConfig {
        AttentionConfig {
            input_dim: 2,
            layers: 1,
            heads: 1,
            model_dim: 2,
            attn_dim: 2,
            ff_multiplier: 2,
            dropout: 0.0,
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut cfg = AttentionConfig::desk_scale(4);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_token_passes_through_identity_projections() {
        let cfg = tiny_cfg();
        let net = AttentionNetwork::identity_projection(cfg).unwrap();
        let mut w = MeasurementWindow::new(4).unwrap();
        w.push(DVector::from_vec(vec![0.3, -1.7])).unwrap();
        let out = attention_filter(&w, &net).unwrap();
        assert_relative_eq!(out[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(out[1], -1.7, epsilon = 1e-12);
    }

    #[test]
    fn identical_tokens_pass_through_any_query_key() {
        // Attention outputs a convex combination of tokens; when all tokens
        // are equal the mixture is the common value, whatever Q/K weights do.
        let cfg = tiny_cfg();
        let mut net = AttentionNetwork::identity_projection(cfg).unwrap();
        net.params.layers[0].wq = DMatrix::from_row_slice(2, 2, &[0.7, -0.2, 0.4, 1.1]);
        net.params.layers[0].wk = DMatrix::from_row_slice(2, 2, &[-0.3, 0.9, 0.2, -0.5]);
        let mut w = MeasurementWindow::new(8).unwrap();
        for _ in 0..5 {
            w.push(DVector::from_vec(vec![2.5, 0.5])).unwrap();
        }
        let out = attention_filter(&w, &net).unwrap();
        assert_relative_eq!(out[0], 2.5, epsilon = 1e-12);
        assert_relative_eq!(out[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn two_tokens_match_hand_computed_attention() {
        // One head, d = d_k = 2, identity encoder/decoder/value/output and no
        // feed-forward: output row = softmax(q·Kᵀ/√2)·X for the final token.
        let cfg = tiny_cfg();
        let mut net = AttentionNetwork::identity_projection(cfg).unwrap();
        let wq = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]);
        let wk = DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.1]);
        net.params.layers[0].wq = wq;
        net.params.layers[0].wk = wk;

        let t0 = [1.0, 2.0];
        let t1 = [3.0, -1.0];
        let mut w = MeasurementWindow::new(2).unwrap();
        w.push(DVector::from_column_slice(&t0)).unwrap();
        w.push(DVector::from_column_slice(&t1)).unwrap();
        let out = attention_filter(&w, &net).unwrap();

        // Hand computation, scalar by scalar.
        // q1 = [0.1*3, 0.2*(-1)] = [0.3, -0.2]
        // k0 = [0.3*1, 0.1*2]   = [0.3, 0.2]
        // k1 = [0.3*3, 0.1*(-1)] = [0.9, -0.1]
        let s0 = (0.3 * 0.3 + (-0.2) * 0.2) / 2.0_f64.sqrt();
        let s1 = (0.3 * 0.9 + (-0.2) * (-0.1)) / 2.0_f64.sqrt();
        let (e0, e1) = (s0.exp(), s1.exp());
        let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let expect = [a0 * t0[0] + a1 * t1[0], a0 * t0[1] + a1 * t1[1]];

        assert_relative_eq!(out[0], expect[0], epsilon = 1e-12);
        assert_relative_eq!(out[1], expect[1], epsilon = 1e-12);
    }

    #[test]
    fn attention_rows_are_probability_distributions() {
        let cfg = AttentionConfig::desk_scale(3);
        let net = AttentionNetwork::random(cfg, 42).unwrap();
        let tokens: Vec<DVector<f64>> = (0..6)
            .map(|i| DVector::from_fn(3, |j, _| (i as f64) * 0.3 - (j as f64) * 0.1))
            .collect();
        let (_, maps) = net.forward_with_maps(&tokens).unwrap();
        assert_eq!(maps.len(), 2);
        for layer in &maps {
            assert_eq!(layer.len(), 2);
            for head in layer {
                for row in head.row_iter() {
                    let sum: f64 = row.iter().sum();
                    assert_relative_eq!(sum, 1.0, epsilon = 1e-6);
                    assert!(row.iter().all(|p| *p >= 0.0));
                }
            }
        }
    }

    #[test]
    fn token_dimension_mismatch_is_config_error() {
        let net = AttentionNetwork::random(AttentionConfig::desk_scale(3), 1).unwrap();
        let mut w = MeasurementWindow::new(4).unwrap();
        w.push(DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            attention_filter(&w, &net),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        // Oracle: central finite differences on the flat parameter vector.
        let cfg = AttentionConfig {
            input_dim: 2,
            layers: 2,
            heads: 2,
            model_dim: 4,
            attn_dim: 4,
            ff_multiplier: 2,
            dropout: 0.0,
        };
        let net = AttentionNetwork::random(cfg, 9).unwrap();
        let tokens: Vec<DVector<f64>> = vec![
            DVector::from_vec(vec![0.5, -0.2]),
            DVector::from_vec(vec![1.1, 0.4]),
            DVector::from_vec(vec![-0.3, 0.9]),
        ];
        let target = DVector::from_vec(vec![0.7, 0.1]);

        let loss_of = |params: &[f64]| -> f64 {
            let mut probe = net.clone();
            probe.params.unflatten(params);
            let out = probe.forward(&tokens).unwrap();
            (&out - &target).norm_squared()
        };

        let (_, cache) = net.forward_full(&tokens, None).unwrap();
        let out = net.forward(&tokens).unwrap();
        let analytic = net.backward(&cache, &(2.0 * (&out - &target))).flatten();

        let flat = net.params.flatten();
        let mut worst = 0.0_f64;
        for i in 0..flat.len() {
            let h = 1e-5 * (1.0 + flat[i].abs());
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic[i] - fd).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn training_reduces_prediction_loss() {
        // AR(1)-like smooth series the network can learn to extrapolate.
        let series: Vec<DVector<f64>> = (0..120)
            .map(|i| {
                let t = i as f64 * 0.2;
                DVector::from_vec(vec![t.sin(), (0.5 * t).cos()])
            })
            .collect();
        let cfg = AttentionConfig {
            input_dim: 2,
            layers: 1,
            heads: 2,
            model_dim: 8,
            attn_dim: 8,
            ff_multiplier: 2,
            dropout: 0.0,
        };
        let mut net = AttentionNetwork::random(cfg, 3).unwrap();
        let losses = train_attention(
            &mut net,
            &series,
            &AttentionTrainConfig {
                epochs: 30,
                batch: 16,
                window: 6,
                adam: AdamConfig {
                    lr: 0.01,
                    ..AdamConfig::default()
                },
                seed: 5,
            },
        )
        .unwrap();
        assert!(
            losses.last().unwrap() < &(0.5 * losses[0]),
            "loss did not drop: first {} last {}",
            losses[0],
            losses.last().unwrap()
        );
    }

    #[test]
    fn dropout_training_still_runs_and_inference_is_deterministic() {
        let series: Vec<DVector<f64>> = (0..60)
            .map(|i| DVector::from_vec(vec![(i as f64 * 0.3).sin()]))
            .collect();
        let cfg = AttentionConfig {
            input_dim: 1,
            layers: 1,
            heads: 1,
            model_dim: 4,
            attn_dim: 4,
            ff_multiplier: 2,
            dropout: 0.25,
        };
        let mut net = AttentionNetwork::random(cfg, 8).unwrap();
        train_attention(
            &mut net,
            &series,
            &AttentionTrainConfig {
                epochs: 2,
                batch: 8,
                window: 5,
                adam: AdamConfig::default(),
                seed: 1,
            },
        )
        .unwrap();
        let tokens: Vec<DVector<f64>> =
            (0..5).map(|i| DVector::from_element(1, i as f64)).collect();
        let a = net.forward(&tokens).unwrap();
        let b = net.forward(&tokens).unwrap();
        assert_eq!(a, b);
    }
}
