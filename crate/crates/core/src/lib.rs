//! Dense f64 tensors, a reverse-mode tape, and dynamic convolution layers.

pub mod accounting;
pub mod autograd;
pub mod decomposition;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod svd;
pub mod tensor;
pub mod zoo;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{AttentionMode, Conv2dGeom, Tensor};
