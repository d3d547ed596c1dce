//! Dense `f64` tensors with tape-based reverse-mode gradients.

pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use ops::{concat, stack};
pub use tape::{BackwardFn, ParamId, ParamStore, Parameter, Tape, Var};
pub use tensor::Tensor;
