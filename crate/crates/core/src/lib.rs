pub mod cgan;
pub mod classify;
pub mod config;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
