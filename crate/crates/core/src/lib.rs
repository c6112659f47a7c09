pub mod backbone;
pub mod checkpoint;
pub mod coords;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod upsampler;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
