pub mod analysis;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Shape, Tensor};
