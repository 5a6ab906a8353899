//! Dense tensors, reverse-mode autodiff and the optimizer.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use rng::{generator, Generator};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
