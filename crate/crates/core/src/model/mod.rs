//! Target transformer and draft head.

mod block;
mod config;
mod draft;
mod kv_cache;
mod target;

use std::sync::Arc;

pub use block::BlockParams;
pub use config::ModelConfig;
pub use draft::{DraftHead, DraftOutput, SharedHead};
pub use kv_cache::{KvCache, LayerKv};
pub use target::{TargetModel, TargetOutput};

pub(crate) use block::{block_forward, AttnContext, BlockVars, BLOCK_PARAM_NAMES};
pub(crate) use draft::DraftVars;

use crate::numerics::{AttnMask, BoolMatrix, Float, Rng, Tensor};

/// Model weights are reference counted so the draft head can share the
/// target's embedding, final norm and LM head without copying.
pub type Param<T> = Arc<Tensor<T>>;

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

pub(crate) fn normal_param<T: Float>(shape: &[usize], std: f64, rng: &mut Rng) -> Param<T> {
    Arc::new(Tensor::from_fn(shape, |_| T::of(rng.normal() * std)))
}

pub(crate) fn ones_param<T: Float>(n: usize) -> Param<T> {
    Arc::new(Tensor::full(&[n], T::one()))
}

/// Mask over `prefix` cached keys (always visible) plus the new rows,
/// which follow `inner` or are causal when `inner` is `None`.
pub(crate) fn prefixed_mask(prefix: usize, n: usize, inner: Option<&BoolMatrix>) -> crate::Result<Arc<AttnMask>> {
    match inner {
        None => Ok(Arc::new(AttnMask::causal_with_prefix(prefix, n))),
        Some(m) => {
            if m.rows() != n || m.cols() != n {
                crate::error::bail!(Shape, "mask {}x{} for {} new tokens", m.rows(), m.cols(), n);
            }
            Ok(Arc::new(AttnMask::with_prefix(prefix, m)?))
        }
    }
}

pub(crate) fn token_ids(tokens: &[u32], vocab: usize) -> crate::Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| {
            if (t as usize) < vocab {
                Ok(t as usize)
            } else {
                crate::error::bail!(Parameter, "token id {t} outside vocabulary of {vocab}")
            }
        })
        .collect()
}
