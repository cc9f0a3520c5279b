//! Dense `f64` tensors, a reverse-mode tape and an Adam optimizer.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use params::{Bound, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
