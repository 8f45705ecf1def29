//! Multiclass classification with error-correcting output codes whose coding
//! matrix and decoder are learned jointly with gradient boosted base learners.

pub mod cli;
pub mod codebook;
pub mod data_io;
pub mod error;
pub mod learners;
pub mod matrix;
pub mod matrix_optimizer;
pub mod seed;
pub mod softmax_decoder;
pub mod synth;
mod textfmt;
pub mod trainer;

pub use codebook::CodingMatrix;
pub use data_io::{LabelMap, SparseDataset};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use softmax_decoder::DecoderParams;
pub use trainer::{TrainConfig, TrainedModel};
