pub mod cli;
pub mod codec;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Scalar, Tensor};
