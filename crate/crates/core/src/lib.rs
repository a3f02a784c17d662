pub mod attention;
pub mod checks;
pub mod error;
pub mod geometry;
pub mod logic;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, Tensor, Var};
