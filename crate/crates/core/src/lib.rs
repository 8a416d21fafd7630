//! Bit-width optimization for discriminative deep belief networks.
//!
//! - [`fixedpoint`]: `Qm.n` formats and round-to-nearest quantization.
//! - [`dataset`]: MNIST IDX loading, binarization and splits.
//! - [`ddbn`]: the network, CD training, inference and model files.
//! - [`criticality`]: per-neuron loss sensitivity and ranking.
//! - [`search`]: the two-phase bit-length search, ablations and pruning curves.

pub mod criticality;
pub mod dataset;
pub mod ddbn;
pub mod fixedpoint;
pub mod search;

use thiserror::Error;

pub use dataset::{DatasetError, LabeledBinaryDataset};
pub use ddbn::{ClassifyMode, DdbnModel, NeuronId, PrecisionMap, TrainConfig};
pub use fixedpoint::{quantize, quantize_all, FixedPointFormat, FormatError};
pub use search::{SearchConfig, SearchError, Variant};

/// An invalid configuration value.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ddbn::ModelError),
    #[error("training set is empty")]
    EmptyData,
    #[error("model parameters are not quantized under the given precision map")]
    NotQuantized,
}
