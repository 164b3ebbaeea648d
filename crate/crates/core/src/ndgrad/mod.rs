//! Dense-tensor numerical core with reverse-mode automatic differentiation.
//!
//! Forward operations are recorded on a [`Tape`]; [`Tape::backward`] replays
//! the adjoint rules in reverse order and returns a [`Gradients`] store with
//! one accumulator per `requires_grad` tensor reachable from the loss.
//!
//! Tensors are immutable handles (cheap to clone, safe to send across
//! threads). A tape is single-threaded and is consumed by exactly one
//! backward pass; one training step uses one tape.

mod checkpoint;
mod ops;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, RawParameter, CHECKPOINT_VERSION};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape};
pub use tensor::{Parameter, Tensor};
