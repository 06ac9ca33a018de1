//! Tensors, a reverse-mode tape and the layers the highlighting model is built from.

pub mod check;
pub mod conv;
pub mod error;
pub mod layers;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
