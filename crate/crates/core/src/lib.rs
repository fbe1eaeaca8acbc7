pub mod autodiff;
pub mod baselines;
pub mod clinical;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcam;
pub mod image;
pub mod inference;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

/// Default working precision.
pub type Real = f32;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type FusionModel32 = fusion::FusionModel<f32>;
pub type FusionModel64 = fusion::FusionModel<f64>;
pub type Checkpoint32 = fusion::Checkpoint<f32>;
pub type Checkpoint64 = fusion::Checkpoint<f64>;
pub type PreparedData32 = synth::PreparedData<f32>;
