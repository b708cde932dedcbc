//! Dense `f64` tensors with reverse-mode differentiation.

pub mod gradcheck;
mod optim;
mod store;
mod tape;
mod tensor;

pub use optim::{global_norm, sgd_like_step, zero_gradients, Hyperparams, Optimizer, OptimizerState};
pub use store::ParameterStore;
pub use tape::{Bindings, Gradients, Tape, Var};
pub use tensor::Tensor;

