//! Principal component analysis for measurement noise reduction.
//!
//! A basis is fit by SVD of the mean-centered sample matrix; the top-k right
//! singular vectors are the principal directions. Scalar traces are lifted to
//! vectors via temporal sliding windows (see [`embed_trace`]) so the same
//! machinery applies to 1-D telemetry.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default temporal embedding width for scalar traces.
pub const EMBED_WIDTH: usize = 8;

/// Default retained component count.
pub const DEFAULT_COMPONENTS: usize = 2;

/// Orthonormal projection basis from [`fit_pca`].
#[derive(Debug, Clone)]
pub struct PcaBasis {
    /// Sample mean subtracted before projection.
    pub mean: DVector<f64>,
    /// Row-per-component projection matrix (k × d), mutually orthonormal.
    pub components: DMatrix<f64>,
    /// Retained component count.
    pub k: usize,
    /// Per-component variance, non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaBasis {
    /// Identity basis: projects without changing coordinates. Used to bypass
    /// dimensionality reduction while keeping the pipeline shape.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            components: DMatrix::identity(dim, dim),
            k: dim,
            explained_variance: vec![0.0; dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.components.ncols()
    }

    /// Projects a vector onto the retained components.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input dim {} does not match basis dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(&self.components * (x - &self.mean))
    }

    /// Maps projected coordinates back to the input space.
    pub fn reconstruct(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.k {
            return Err(Error::Dimension(format!(
                "coordinate dim {} does not match component count {}",
                y.len(),
                self.k
            )));
        }
        Ok(&self.mean + self.components.transpose() * y)
    }

    /// Projection followed by reconstruction: the denoised input.
    pub fn denoise(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let y = self.project(x)?;
        self.reconstruct(&y)
    }
}

/// Fits the top-`k` principal directions of the mean-centered samples.
///
/// Zero-variance data yields a basis with all-zero components and a logged
/// warning rather than an error, so degenerate traces keep flowing.
pub fn fit_pca(samples: &[DVector<f64>], k: usize) -> Result<PcaBasis> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "PCA needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::Dimension("samples must share one dimension".into()));
    }
    if k == 0 || k > dim {
        return Err(Error::Config(format!(
            "component count {k} must be in 1..={dim}"
        )));
    }
    let n = samples.len();
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= n as f64;

    // Centered data matrix, one sample per row.
    let mut centered = DMatrix::zeros(n, dim);
    for (i, s) in samples.iter().enumerate() {
        centered.set_row(i, &(s - &mean).transpose());
    }

    let svd = centered.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD failed to produce right singular vectors".into()))?;

    // Order components by singular value, largest first.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });

    let scale = 1.0 / (n as f64 - 1.0);
    let total_variance: f64 = svd.singular_values.iter().map(|s| s * s * scale).sum();
    if total_variance <= 1e-24 {
        log::warn!("PCA input has zero variance; returning zero basis");
        return Ok(PcaBasis {
            mean,
            components: DMatrix::zeros(k, dim),
            k,
            explained_variance: vec![0.0; k],
        });
    }

    let mut components = DMatrix::zeros(k, dim);
    let mut explained_variance = Vec::with_capacity(k);
    for (row, &idx) in order.iter().take(k).enumerate() {
        components.set_row(row, &v_t.row(idx));
        let s = svd.singular_values[idx];
        explained_variance.push(s * s * scale);
    }

    Ok(PcaBasis {
        mean,
        components,
        k,
        explained_variance,
    })
}

/// Lifts a scalar trace into overlapping temporal windows of `width`,
/// producing one vector per window position (oldest sample first).
pub fn embed_trace(trace: &[f64], width: usize) -> Result<Vec<DVector<f64>>> {
    if width == 0 {
        return Err(Error::Config("embedding width must be at least 1".into()));
    }
    if trace.len() < width {
        return Err(Error::Config(format!(
            "trace length {} is shorter than embedding width {width}",
            trace.len()
        )));
    }
    Ok(trace
        .windows(width)
        .map(|w| DVector::from_column_slice(w))
        .collect())
}
