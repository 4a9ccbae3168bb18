pub mod backbone;
pub mod chebykan;
pub mod cli;
pub mod config;
pub mod data;
pub mod eksa;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
