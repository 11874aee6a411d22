pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod eval;
pub mod fusion;
pub mod geodata;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod train;

pub use tensor::{Element, Tensor, TensorError};
