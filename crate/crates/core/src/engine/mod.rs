//! Dense tensors with tape-based reverse-mode differentiation.

pub mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{AdamConfig, ParamSet};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
