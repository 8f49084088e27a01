pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
pub mod data;
pub mod model;
pub mod decode;
pub mod eval;
pub mod train;
