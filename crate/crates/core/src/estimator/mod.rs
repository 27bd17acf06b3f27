//! State estimation: system models, EKF steps, PCA noise reduction,
//! attention smoothing, and the combined measurement pipeline.

pub mod attention;
pub mod kf;
pub mod model;
pub mod pca;
pub mod pipeline;
pub mod window;

pub use attention::{
    attention_filter, train_attention, AttentionConfig, AttentionNetwork, AttentionTrainConfig,
};
pub use kf::{kf_gain, kf_predict, kf_update, kf_update_with, StateEstimate, UpdateForm};
pub use model::SystemModel;
pub use pca::{embed_trace, fit_pca, PcaBasis, DEFAULT_COMPONENTS, EMBED_WIDTH};
pub use pipeline::{ksurf_step, KsurfConfig, KsurfEstimator};
pub use window::MeasurementWindow;
