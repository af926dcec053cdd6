//! Per-pot soil-moisture forecasting with a small LSTM network trained from
//! scratch: min-max scaling, windowing, hand-written backpropagation through
//! time, Adam training with best-on-validation selection, MAE evaluation and
//! a binary checkpoint format.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod predictor;
pub mod scaler;
pub mod train;
pub mod window;

use thiserror::Error;

pub use loss::{mae, mse};
pub use model::{lstm_cell, LstmParams, Params, Shapes};
pub use predictor::{EvalReport, ForecastModel, ModelSet};
pub use scaler::Scaler;
pub use train::{train, EpochRecord, History, TrainConfig};
pub use window::{make_sequences, Sample, WindowSpec};

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("need ≥ {needed} rows, log has {found}")]
    NotEnoughRows { needed: usize, found: usize },
    #[error("loss became {loss} at epoch {epoch}, batch {batch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Store(#[from] drip_core::store::StoreError),
}
