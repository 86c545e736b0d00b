pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod registry;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use tensor::{Scalar, Tensor, TensorError};
