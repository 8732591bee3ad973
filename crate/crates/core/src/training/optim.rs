use std::sync::Arc;

use crate::error::{bail, Result};
use crate::model::Param;
use crate::numerics::Float;

/// Adam with decoupled weight decay. Decay applies to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads[i]` belongs to `params[i]`; `None` means no
    /// gradient reached that parameter this step.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            bail!(Shape, "{} parameters but {} gradients", params.len(), grads.len());
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let decay = if p.shape().len() >= 2 { T::of(1.0 - lr * self.weight_decay) } else { T::one() };
            let w = Arc::make_mut(p).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for e in 0..w.len() {
                m[e] = b1 * m[e] + (T::one() - b1) * g[e];
                v[e] = b2 * v[e] + (T::one() - b2) * g[e] * g[e];
                w[e] = w[e] * decay - step * m[e] / ((v[e] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Linear warmup, then cosine decay to a tenth of the peak.
pub fn learning_rate(peak: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
