use std::sync::Arc;

use super::{normal_param, ones_param, Param};
use crate::error::Result;
use crate::numerics::{AttnMask, Float, Graph, Rng, Var};

/// Pre-norm decoder block: causal self-attention with rotary positions,
/// then a SiLU feed-forward layer, each with a residual connection.
#[derive(Clone, Debug)]
pub struct BlockParams<T> {
    pub attn_norm: Param<T>,
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub ffn_norm: Param<T>,
    pub w1: Param<T>,
    pub w2: Param<T>,
}

pub(crate) const BLOCK_PARAM_NAMES: [&str; 8] = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2"];

impl<T: Float> BlockParams<T> {
    /// Output projections are scaled down by `out_scale` so the residual
    /// stream stays bounded at depth.
    pub fn init(d: usize, d_ff: usize, std: f64, out_scale: f64, rng: &mut Rng) -> Self {
        Self {
            attn_norm: ones_param(d),
            wq: normal_param(&[d, d], std, rng),
            wk: normal_param(&[d, d], std, rng),
            wv: normal_param(&[d, d], std, rng),
            wo: normal_param(&[d, d], std * out_scale, rng),
            ffn_norm: ones_param(d),
            w1: normal_param(&[d, d_ff], std, rng),
            w2: normal_param(&[d_ff, d], std * out_scale, rng),
        }
    }

    pub fn params(&self) -> [&Param<T>; 8] {
        [&self.attn_norm, &self.wq, &self.wk, &self.wv, &self.wo, &self.ffn_norm, &self.w1, &self.w2]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w1,
            &mut self.w2,
        ]
    }

    pub(crate) fn from_params(mut it: impl Iterator<Item = Param<T>>) -> Option<Self> {
        Some(Self {
            attn_norm: it.next()?,
            wq: it.next()?,
            wk: it.next()?,
            wv: it.next()?,
            wo: it.next()?,
            ffn_norm: it.next()?,
            w1: it.next()?,
            w2: it.next()?,
        })
    }

    pub(crate) fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BlockVars {
        let mut v = self.params().map(|p| g.leaf_arc(Arc::clone(p), trainable)).into_iter();
        let mut next = || v.next().expect("eight block parameters");
        BlockVars {
            attn_norm: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ffn_norm: next(),
            w1: next(),
            w2: next(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w1: Var,
    pub w2: Var,
}

impl BlockVars {
    pub fn all(&self) -> [Var; 8] {
        [self.attn_norm, self.wq, self.wk, self.wv, self.wo, self.ffn_norm, self.w1, self.w2]
    }
}

/// Output of one block forward. `k` and `v` are the new rows (post-rotary)
/// that a cache would append.
pub(crate) struct BlockOut {
    pub out: Var,
    pub k: Var,
    pub v: Var,
}

/// Shared inputs of a block forward.
pub(crate) struct AttnContext<'a> {
    pub positions: &'a [usize],
    pub batch: usize,
    pub n_heads: usize,
    pub eps: f64,
    /// Key/value blocks that precede this forward's own rows.
    pub past: &'a [(Var, Var)],
    pub mask: &'a Arc<AttnMask>,
}

pub(crate) fn block_forward<T: Float>(g: &mut Graph<T>, p: &BlockVars, x: Var, ctx: &AttnContext<'_>) -> Result<BlockOut> {
    let h = g.rms_norm(x, p.attn_norm, ctx.eps)?;
    let q = g.matmul(h, p.wq)?;
    let q = g.rope(q, ctx.positions, ctx.n_heads)?;
    let k = g.matmul(h, p.wk)?;
    let k = g.rope(k, ctx.positions, ctx.n_heads)?;
    let v = g.matmul(h, p.wv)?;
    let mut keys = Vec::with_capacity(ctx.past.len() + 1);
    let mut values = Vec::with_capacity(ctx.past.len() + 1);
    for &(pk, pv) in ctx.past {
        if g.value(pk).rows() > 0 {
            keys.push(pk);
            values.push(pv);
        }
    }
    keys.push(k);
    values.push(v);
    let a = g.attention(q, &keys, &values, Arc::clone(ctx.mask), ctx.n_heads, ctx.batch)?;
    let a = g.matmul(a, p.wo)?;
    let x = g.add(x, a)?;
    let h = g.rms_norm(x, p.ffn_norm, ctx.eps)?;
    let h = g.matmul(h, p.w1)?;
    let h = g.silu(h);
    let h = g.matmul(h, p.w2)?;
    let out = g.add(x, h)?;
    Ok(BlockOut { out, k, v })
}
