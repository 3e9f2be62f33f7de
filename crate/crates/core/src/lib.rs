pub mod blocks;
pub mod diagnostics;
pub mod error;
pub mod freq;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scan;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod timing;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
