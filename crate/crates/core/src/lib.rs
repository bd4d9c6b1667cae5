//! Rehearsal-free online class-incremental learning with a frozen
//! transformer backbone and a single lightweight prompt generator.

pub mod autograd;
pub mod backbone;
pub mod container;
pub mod data_stream;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod objectives;
pub mod optim;
pub mod learner;
pub mod prompt;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
