//! Shadow detection by separating shadow and background features.
//!
//! The crate holds a small reverse-mode autodiff engine over `f64` tensors,
//! the network modules built on it, losses and metrics, mean-field CRF
//! refinement, a dataset pipeline and the training loop used by the CLI.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod crf;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fsr;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod ssf;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use model::{Ablation, ModelConfig, SddNet};
pub use tensor::Tensor;
pub use types::{FeatureGrid, Image, RgbPrediction, ShadowMask, ShadowProbMap};
