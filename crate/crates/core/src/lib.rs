pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod plasticity;
pub mod protocols;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Network64 = nn::Network<f64>;
pub type Network32 = nn::Network<f32>;
pub type Trainer64 = protocols::Trainer<f64>;
pub type Adam64 = optim::Adam<f64>;
