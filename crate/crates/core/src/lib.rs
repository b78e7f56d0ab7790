//! Domain-adversarial representation learning with layer-aware attribution.

pub mod attribution;
pub mod autodiff;
pub mod error;
pub mod manifold;
pub mod data;
pub mod net;
pub mod stratify;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Matrix;
