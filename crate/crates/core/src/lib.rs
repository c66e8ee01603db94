pub mod autodiff;
pub mod catalog;
pub mod cell;
pub mod config;
pub mod derived;
pub mod error;
pub mod features;
pub mod genome;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod params;
pub mod search;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
