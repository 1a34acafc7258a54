pub mod adaptation;
pub mod analysis;
pub mod atha;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fsio;
pub mod pretrain;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
