//! Small from-scratch network engine: 1-D convolutional trunk with
//! per-parameter regression branches, dense baseline, Adam training and
//! finite-difference gradient checking.

mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod network;
mod optim;
mod predict;
mod train;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::{check_layer, check_network, GradCheckOptions, GradCheckReport};
pub use layers::{Aux, Layer, LayerKind, LayerSpec, Mode, Shape};
pub use loss::rms_loss;
pub use network::{
    build_cnn, build_mlp, cnn_architecture, mlp_architecture, Architecture, Cache, Network,
    DEFAULT_DROPOUT,
};
pub use optim::Adam;
pub use predict::{predict, predict_normalized, Prediction};
pub use train::{evaluate, train, ParamError, TestMetrics, TrainConfig, TrainingReport};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("input too short: length {length}, needs at least {needed}")]
    InputTooShort { length: usize, needed: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("backward called before forward")]
    NoForwardPass,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("normalization statistics missing from dataset meta")]
    MissingStats,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
