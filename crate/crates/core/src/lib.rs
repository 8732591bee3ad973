//! Speculative decoding with an EAGLE-style draft head trained by
//! harmonized objective distillation (a Top-K distillation loss) and
//! harmonized context alignment (multi-step staircase-masked training).
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, attention masks, the deterministic [`Rng`] and a
//!   small reverse-mode autodiff tape.
//! * [`model`]: the decoder-only target transformer, the single-block draft
//!   head that shares its embedding and LM head, and the KV cache.
//! * [`training`]: alignment masks, losses, dataset construction and the
//!   draft-head training loop.
//! * [`drafting`]: chain and dynamic-tree drafting with tree attention masks.
//! * [`verification`]: lossless acceptance by (multi-round) rejection
//!   sampling and the sampling filters.
//! * [`engine`]: the decode loop and cycle metrics.
//! * [`checkpoint`]: the binary container for weights and token caches.
//! * [`corpus`], [`pretrain`] and [`bench`]: the experiment harness driven
//!   by the command-line tool.

pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod drafting;
pub mod engine;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod training;
pub mod verification;

pub use error::{HassError, Result};
pub use numerics::{Rng, Tensor};
