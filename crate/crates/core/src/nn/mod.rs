//! Network engine trained through PCM crossbars.
//!
//! Activations are `ArrayD<f64>` with the batch as the leading axis. Dense and
//! convolution layers hold their weights either digitally (reference runs and
//! gradient checks) or on a [`CrossbarArray`](crate::crossbar::CrossbarArray).

mod data;
mod layers;
mod network;
mod spec;
mod train;
mod update;

pub use data::{calibration_subset, Dataset};
pub use layers::{BatchNormState, DenseLayer, ConvLayer, Node, WeightStore};
pub use network::{
    build_network, softmax_xent, AnalogConfig, Backend, ForwardCache, Gradients, LayerGrad, Network, NetworkSpec, Phase,
    QuantConfig,
};
pub use spec::{apply_width_multiplier, infer_shapes, parameter_count, scale_width, LayerSpec};
pub use train::{adabs_calibrate, epoch_order, evaluate, lr_at_epoch, train, EpochMetrics, TrainReport, TrainingConfig};
pub use update::{apply_gradients, quantize_and_apply, GradQuantizer, Rounding, UpdateStats};

use thiserror::Error;

use crate::crossbar::CrossbarError;
use crate::device::DeviceError;
use crate::hybridweight::HybridError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network: {0}")]
    Spec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("backward called without a training-mode forward cache")]
    MissingCache,
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error(transparent)]
    Crossbar(#[from] CrossbarError),
    #[error(transparent)]
    Hybrid(#[from] HybridError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}
