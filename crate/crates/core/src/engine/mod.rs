//! The speculative decode loop and its metrics.

mod decode;
mod metrics;

pub use decode::{decode, DecodeConfig, DecodeOutput, Decoder, Method, RunReport};
pub use metrics::{compute_alpha, compute_tau, CycleMetrics};
