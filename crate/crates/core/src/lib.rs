pub mod audio;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
