//! Recurrent noise-covariance estimation for the filter: an LSTM maps a
//! window of recent measurements to the diagonals of the process and
//! measurement noise matrices, trained end-to-end against the filter's
//! one-step prediction error.

mod lstm;
mod train;

pub use lstm::{
    lstm_forward, softplus, LstmConfig, LstmInput, LstmLayer, LstmParams, NoiseEstimate,
};
pub use train::{
    apply_noise, ekf_abs_errors, evaluate_deciles, grid_search, train_ksurfnet, DeltaSeries,
    GridCell, GridSpec, TrainOutcome, DECILES,
};
