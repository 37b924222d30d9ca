pub mod autodiff;
pub mod csvfmt;
pub mod data;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
