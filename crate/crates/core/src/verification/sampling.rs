use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{argmax, Float};
use crate::training::top_k_indices;

/// How the target distribution is shaped before sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    /// 0 selects greedy decoding (argmax, ties to the lower id).
    pub temperature: f64,
    pub top_p: f64,
    /// 0 disables the top-k filter.
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0, top_k: 0, seed: 0 }
    }
}

/// Slack allowed when a nucleus prefix is compared against `top_p`.
const NUCLEUS_SLACK: f64 = 1e-12;

impl SamplingParams {
    pub fn greedy() -> Self {
        Self { temperature: 0.0, ..Self::default() }
    }

    pub fn with_temperature(temperature: f64) -> Self {
        Self { temperature, ..Self::default() }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            bail!(Parameter, "temperature must be a non-negative number, got {}", self.temperature);
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            bail!(Parameter, "top_p must lie in (0, 1], got {}", self.top_p);
        }
        Ok(())
    }
}

fn point_mass(n: usize, at: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    out[at] = 1.0;
    out
}

/// Top-k then nucleus truncation of a normalized distribution, then
/// renormalization.
fn truncate(mut probs: Vec<f64>, params: &SamplingParams) -> Vec<f64> {
    let n = probs.len();
    let order = top_k_indices(&probs, n);
    let keep_k = if params.top_k == 0 { n } else { params.top_k.min(n) };
    for &x in &order[keep_k..] {
        probs[x] = 0.0;
    }
    if params.top_p < 1.0 {
        let total: f64 = probs.iter().sum();
        let mut acc = 0.0;
        let mut cut = keep_k;
        for (rank, &x) in order[..keep_k].iter().enumerate() {
            acc += probs[x] / total;
            if acc >= params.top_p - NUCLEUS_SLACK {
                cut = rank + 1;
                break;
            }
        }
        for &x in &order[cut..keep_k] {
            probs[x] = 0.0;
        }
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    probs
}

/// Filters a normalized distribution: temperature (as `q^(1/T)`), then
/// top-k, then top-p, then renormalization. `T = 0` gives a point mass at
/// the argmax.
pub fn apply_sampling_filter(q: &[f64], params: &SamplingParams) -> Result<Vec<f64>> {
    params.validate()?;
    if q.is_empty() {
        bail!(Shape, "empty distribution");
    }
    if params.is_greedy() {
        return Ok(point_mass(q.len(), argmax(q)));
    }
    let scaled = if params.temperature == 1.0 {
        q.to_vec()
    } else {
        let inv = 1.0 / params.temperature;
        let w: Vec<f64> = q.iter().map(|&x| if x > 0.0 { (x.ln() * inv).exp() } else { 0.0 }).collect();
        let max_log = q.iter().filter(|&&x| x > 0.0).map(|x| x.ln() * inv).fold(f64::NEG_INFINITY, f64::max);
        // Renormalize in log space when the powers underflow.
        if w.iter().sum::<f64>() > 0.0 {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        } else {
            let e: Vec<f64> = q.iter().map(|&x| if x > 0.0 { (x.ln() * inv - max_log).exp() } else { 0.0 }).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        }
    };
    Ok(truncate(scaled, params))
}

/// The same filter applied to raw logits.
pub fn filter_logits<T: Float>(logits: &[T], params: &SamplingParams) -> Result<Vec<f64>> {
    params.validate()?;
    if params.is_greedy() {
        return Ok(point_mass(logits.len(), argmax(logits)));
    }
    Ok(truncate(softmax_f64(logits, params.temperature), params))
}

/// Softmax of `logits / temperature` computed in f64.
pub fn softmax_f64<T: Float>(logits: &[T], temperature: f64) -> Vec<f64> {
    let inv = 1.0 / temperature;
    let max = logits.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| ((x.f64() - max) * inv).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_nothing_filters() {
        let q = [0.1, 0.6, 0.3];
        assert_eq!(apply_sampling_filter(&q, &SamplingParams::default()).unwrap(), q.to_vec());
    }

    #[test]
    fn nucleus_example() {
        let p = SamplingParams { top_p: 0.8, ..SamplingParams::default() };
        let out = apply_sampling_filter(&[0.5, 0.3, 0.2], &p).unwrap();
        assert!((out[0] - 0.625).abs() < 1e-12 && (out[1] - 0.375).abs() < 1e-12 && out[2] == 0.0);
    }

    #[test]
    fn top_one_and_greedy_are_point_masses() {
        let p = SamplingParams { top_k: 1, ..SamplingParams::default() };
        assert_eq!(apply_sampling_filter(&[0.2, 0.5, 0.3], &p).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(apply_sampling_filter(&[0.4, 0.2, 0.4], &SamplingParams::greedy()).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(filter_logits(&[1.0f32, 3.0, 3.0], &SamplingParams::greedy()).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn temperature_matches_logit_scaling() {
        let logits = [0.3f64, -1.2, 2.0, 0.0];
        let q = softmax_f64(&logits, 1.0);
        let p = SamplingParams::with_temperature(0.5);
        let a = apply_sampling_filter(&q, &p).unwrap();
        let b = filter_logits(&logits, &p).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn invalid_parameters() {
        let q = [0.5, 0.5];
        for p in [
            SamplingParams { top_p: 0.0, ..SamplingParams::default() },
            SamplingParams { temperature: -1.0, ..SamplingParams::default() },
        ] {
            assert!(matches!(apply_sampling_filter(&q, &p), Err(crate::HassError::Parameter(_))));
        }
    }
}
