//! Dense `f64` tensors, reverse-mode differentiation and gradient checking.

pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradReport, ParamGradError};
pub use params::{uniform, xavier, ParamId, ParamStore};
pub use tape::{gelu_scalar, softplus_scalar, Activation, Fault, Grads, Tape, Var};
pub use tensor::Tensor;
