pub mod data;
pub mod error;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
