//! Dense tensors, masks, deterministic randomness and reverse-mode autodiff.

mod float;
mod graph;
mod mask;
mod rng;
mod tensor;

#[cfg(test)]
mod gradcheck;

pub use float::Float;
pub use graph::{Graph, Var, ROPE_THETA};
pub use mask::{AttnMask, BoolMatrix};
pub use rng::Rng;
pub use tensor::{argmax, softmax, Tensor};
