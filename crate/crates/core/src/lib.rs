pub mod adc;
pub mod autograd;
pub mod baselines;
pub mod check;
pub mod codec;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kmeans;
pub mod optim;
pub mod params;
pub mod roles;
pub mod tensor;
pub mod transport;
pub mod vit;
pub mod wire;

pub use error::{Error, ProtocolError, Result};
pub use tensor::Tensor;
