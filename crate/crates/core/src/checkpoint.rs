//! Versioned on-disk formats for trained parameters.
//!
//! Both networks serialize to structured JSON with explicit shape headers:
//! every matrix carries its `rows × cols` and data in column-major order, so
//! a file is self-describing and loads reject shape or version mismatches
//! instead of misinterpreting bytes.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::attention::{AttentionConfig, AttentionNetwork, AttentionParams, LayerParams};
use crate::ksurfnet::{LstmConfig, LstmLayer, LstmParams};

/// Format tag for recurrent noise-estimator checkpoints.
pub const KSURFNET_FORMAT: &str = "ksurfnet-checkpoint";
/// Format tag for attention smoother weights.
pub const ATTENTION_FORMAT: &str = "ksurf-attention";
/// Current version of both formats.
pub const FORMAT_VERSION: u32 = 1;

/// Dense matrix with an explicit shape header, column-major data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Config(format!(
                "matrix header says {}×{} but carries {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_column_slice(self.rows, self.cols, &self.data))
    }
}

fn vector_data(v: &DVector<f64>) -> Vec<f64> {
    v.as_slice().to_vec()
}

fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Config(format!(
            "expected format {expected:?}, file says {format:?}"
        )));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported {expected} version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct LstmLayerData {
    w: MatrixData,
    u: MatrixData,
    b: Vec<f64>,
}

/// On-disk form of a trained noise estimator.
#[derive(Debug, Serialize, Deserialize)]
pub struct KsurfnetCheckpoint {
    format: String,
    version: u32,
    pub config: LstmConfig,
    input_dim: usize,
    obs_dim: usize,
    state_dim: usize,
    layers: Vec<LstmLayerData>,
    w_head: MatrixData,
    b_head: Vec<f64>,
}

impl KsurfnetCheckpoint {
    pub fn new(config: &LstmConfig, params: &LstmParams) -> Self {
        Self {
            format: KSURFNET_FORMAT.into(),
            version: FORMAT_VERSION,
            config: config.clone(),
            input_dim: params.input_dim,
            obs_dim: params.obs_dim,
            state_dim: params.state_dim,
            layers: params
                .layers
                .iter()
                .map(|l| LstmLayerData {
                    w: MatrixData::from_matrix(&l.w),
                    u: MatrixData::from_matrix(&l.u),
                    b: vector_data(&l.b),
                })
                .collect(),
            w_head: MatrixData::from_matrix(&params.w_head),
            b_head: vector_data(&params.b_head),
        }
    }

    pub fn into_params(self) -> Result<(LstmConfig, LstmParams)> {
        check_header(&self.format, self.version, KSURFNET_FORMAT)?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LstmLayer {
                    w: l.w.to_matrix()?,
                    u: l.u.to_matrix()?,
                    b: DVector::from_vec(l.b.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = LstmParams {
            layers,
            w_head: self.w_head.to_matrix()?,
            b_head: DVector::from_vec(self.b_head),
            input_dim: self.input_dim,
            obs_dim: self.obs_dim,
            state_dim: self.state_dim,
        };
        Ok((self.config, params))
    }
}

/// Writes a noise-estimator checkpoint as pretty JSON.
pub fn save_ksurfnet(path: &Path, config: &LstmConfig, params: &LstmParams) -> Result<()> {
    let ckpt = KsurfnetCheckpoint::new(config, params);
    fs::write(path, serde_json::to_string_pretty(&ckpt)?)?;
    Ok(())
}

/// Loads a noise-estimator checkpoint, rejecting unknown formats or versions.
pub fn load_ksurfnet(path: &Path) -> Result<(LstmConfig, LstmParams)> {
    let ckpt: KsurfnetCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    ckpt.into_params()
}

#[derive(Debug, Serialize, Deserialize)]
struct AttentionLayerData {
    wq: MatrixData,
    wk: MatrixData,
    wv: MatrixData,
    wo: MatrixData,
    w1: MatrixData,
    b1: Vec<f64>,
    w2: MatrixData,
    b2: Vec<f64>,
}

/// On-disk form of trained attention smoother weights.
#[derive(Debug, Serialize, Deserialize)]
pub struct AttentionCheckpoint {
    format: String,
    version: u32,
    pub config: AttentionConfig,
    w_in: MatrixData,
    b_in: Vec<f64>,
    layers: Vec<AttentionLayerData>,
    w_out: MatrixData,
    b_out: Vec<f64>,
}

impl AttentionCheckpoint {
    pub fn new(net: &AttentionNetwork) -> Self {
        Self {
            format: ATTENTION_FORMAT.into(),
            version: FORMAT_VERSION,
            config: net.cfg.clone(),
            w_in: MatrixData::from_matrix(&net.params.w_in),
            b_in: vector_data(&net.params.b_in),
            layers: net
                .params
                .layers
                .iter()
                .map(|l| AttentionLayerData {
                    wq: MatrixData::from_matrix(&l.wq),
                    wk: MatrixData::from_matrix(&l.wk),
                    wv: MatrixData::from_matrix(&l.wv),
                    wo: MatrixData::from_matrix(&l.wo),
                    w1: MatrixData::from_matrix(&l.w1),
                    b1: vector_data(&l.b1),
                    w2: MatrixData::from_matrix(&l.w2),
                    b2: vector_data(&l.b2),
                })
                .collect(),
            w_out: MatrixData::from_matrix(&net.params.w_out),
            b_out: vector_data(&net.params.b_out),
        }
    }

    pub fn into_network(self) -> Result<AttentionNetwork> {
        check_header(&self.format, self.version, ATTENTION_FORMAT)?;
        self.config.validate()?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerParams {
                    wq: l.wq.to_matrix()?,
                    wk: l.wk.to_matrix()?,
                    wv: l.wv.to_matrix()?,
                    wo: l.wo.to_matrix()?,
                    w1: l.w1.to_matrix()?,
                    b1: DVector::from_vec(l.b1.clone()),
                    w2: l.w2.to_matrix()?,
                    b2: DVector::from_vec(l.b2.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = AttentionParams {
            w_in: self.w_in.to_matrix()?,
            b_in: DVector::from_vec(self.b_in),
            layers,
            w_out: self.w_out.to_matrix()?,
            b_out: DVector::from_vec(self.b_out),
        };
        Ok(AttentionNetwork {
            cfg: self.config,
            params,
        })
    }
}

/// Writes attention smoother weights as pretty JSON.
pub fn save_attention(path: &Path, net: &AttentionNetwork) -> Result<()> {
    let ckpt = AttentionCheckpoint::new(net);
    fs::write(path, serde_json::to_string_pretty(&ckpt)?)?;
    Ok(())
}

/// Loads attention smoother weights, rejecting unknown formats or versions.
pub fn load_attention(path: &Path) -> Result<AttentionNetwork> {
    let ckpt: AttentionCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    ckpt.into_network()
}
