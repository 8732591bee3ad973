//! Lossless acceptance of drafted tokens and target-side sampling filters.

mod sampling;
mod verify;

pub use sampling::{apply_sampling_filter, filter_logits, softmax_f64, SamplingParams};
pub use verify::{residual, verify_chain, verify_chain_with, verify_tree, verify_tree_with, Coin, Prob, VerifyResult};

#[cfg(test)]
mod tests;
