use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::DataMode;
use crate::checkpoint::{Container, Entry, Payload};
use crate::error::{bail, Result};
use crate::model::TargetModel;
use crate::numerics::{softmax, Rng, Tensor};

/// Target next-token distributions for every position of a window,
/// either complete or truncated to the `k` most likely tokens.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetDist {
    Dense(Tensor<f32>),
    Sparse { vocab: usize, k: usize, indices: Vec<u32>, probs: Vec<f32> },
}

impl TargetDist {
    /// Keeps complete rows when `store_k` covers the vocabulary.
    pub fn from_probs(probs: Tensor<f32>, store_k: usize) -> Self {
        let v = probs.cols();
        if store_k >= v {
            return TargetDist::Dense(probs);
        }
        let mut indices = Vec::with_capacity(probs.rows() * store_k);
        let mut kept = Vec::with_capacity(probs.rows() * store_k);
        for r in 0..probs.rows() {
            for x in super::top_k_indices(probs.row(r), store_k) {
                indices.push(x as u32);
                kept.push(probs.row(r)[x]);
            }
        }
        TargetDist::Sparse { vocab: v, k: store_k, indices, probs: kept }
    }

    pub fn rows(&self) -> usize {
        match self {
            TargetDist::Dense(t) => t.rows(),
            TargetDist::Sparse { k, indices, .. } => indices.len() / k,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            TargetDist::Dense(t) => t.cols(),
            TargetDist::Sparse { vocab, .. } => *vocab,
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, TargetDist::Dense(_))
    }

    /// Row `r` as a dense vector; truncated rows are zero outside the
    /// stored entries.
    pub fn write_row<T: crate::numerics::Float>(&self, r: usize, out: &mut [T]) {
        match self {
            TargetDist::Dense(t) => out.iter_mut().zip(t.row(r)).for_each(|(o, &x)| *o = T::of(x as f64)),
            TargetDist::Sparse { k, indices, probs, .. } => {
                out.iter_mut().for_each(|o| *o = T::zero());
                for e in r * k..(r + 1) * k {
                    out[indices[e] as usize] = T::of(probs[e] as f64);
                }
            }
        }
    }
}

/// One training window: tokens, the target's features at each position,
/// and the target's next-token distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub tokens: Vec<u32>,
    pub features: Tensor<f32>,
    pub q: TargetDist,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        let s = self.tokens.len();
        if self.features.rows() != s || self.q.rows() != s {
            bail!(
                Shape,
                "example of {} tokens has {} feature rows and {} distributions",
                s,
                self.features.rows(),
                self.q.rows()
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub mode: DataMode,
    pub seq_len: usize,
    pub examples: Vec<TrainingExample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetOptions {
    pub seq_len: usize,
    pub stride: usize,
    /// Distributions are stored complete when this covers the vocabulary.
    pub store_top_k: usize,
    /// Evenly spaced subset of the windows when set.
    pub max_examples: Option<usize>,
    /// Prompt length for self-generated text.
    pub prompt_len: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { seq_len: 256, stride: 128, store_top_k: 64, max_examples: None, prompt_len: 32 }
    }
}

/// Start offsets of `ceil((len - S) / stride) + 1` windows; the last one
/// is clamped to end at the corpus end.
pub fn window_starts(len: usize, seq_len: usize, stride: usize) -> Result<Vec<usize>> {
    if seq_len == 0 || stride == 0 {
        bail!(Config, "window length and stride must be positive");
    }
    if len < seq_len {
        bail!(Data, "corpus of {len} tokens is shorter than one window of {seq_len}");
    }
    let count = (len - seq_len).div_ceil(stride) + 1;
    Ok((0..count).map(|i| (i * stride).min(len - seq_len)).collect())
}

/// Runs the target over each window and records tokens, features and
/// next-token distributions. In self-generated mode the window text is
/// the target's own T=1 continuation of the window's first
/// `prompt_len` corpus tokens.
pub fn build_dataset(
    mode: DataMode,
    corpus: &[u32],
    target: &TargetModel<f32>,
    opts: &DatasetOptions,
    rng: &mut Rng,
) -> Result<Dataset> {
    if opts.seq_len > target.config().max_seq_len {
        bail!(Config, "window {} exceeds max_seq_len {}", opts.seq_len, target.config().max_seq_len);
    }
    let mut starts = window_starts(corpus.len(), opts.seq_len, opts.stride)?;
    if let Some(max) = opts.max_examples.filter(|&m| m < starts.len()) {
        starts = (0..max).map(|i| starts[i * starts.len() / max]).collect();
    }
    let mut examples = Vec::with_capacity(starts.len());
    for (n, &s) in starts.iter().enumerate() {
        let window = &corpus[s..s + opts.seq_len];
        let tokens = match mode {
            DataMode::Fixed => window.to_vec(),
            DataMode::SelfGenerated => sample_continuation(target, &window[..opts.prompt_len.clamp(1, opts.seq_len)], opts.seq_len, rng)?,
        };
        let (logits, features) = target.forward_full(&tokens)?;
        let q = TargetDist::from_probs(softmax(&logits, 1.0)?, opts.store_top_k);
        examples.push(TrainingExample { tokens, features, q });
        if (n + 1) % 100 == 0 {
            log::info!("dataset: {}/{} windows", n + 1, starts.len());
        }
    }
    Ok(Dataset { mode, seq_len: opts.seq_len, examples })
}

/// Extends `prompt` to `len` tokens by sampling from the target at T=1.
pub fn sample_continuation(target: &TargetModel<f32>, prompt: &[u32], len: usize, rng: &mut Rng) -> Result<Vec<u32>> {
    let mut cache = target.new_cache();
    let mut tokens = prompt.to_vec();
    let (mut logits, _) = target.target_forward(prompt, &mut cache)?;
    while tokens.len() < len {
        let last = softmax(&logits.select_rows(&[logits.rows() - 1]), 1.0)?;
        let weights: Vec<f64> = last.data().iter().map(|&p| p as f64).collect();
        let next = rng.categorical(&weights) as u32;
        tokens.push(next);
        if tokens.len() < len {
            logits = target.target_forward(&[next], &mut cache)?.0;
        }
    }
    Ok(tokens)
}

pub const DATASET_KIND: &str = "dataset";

impl Dataset {
    pub fn full_q(&self) -> bool {
        self.examples.first().is_none_or(|e| e.q.is_full())
    }

    pub fn to_container(&self) -> Result<Container> {
        let Some(first) = self.examples.first() else {
            bail!(Data, "cannot store an empty dataset");
        };
        let (n, s, d, v) = (self.examples.len(), self.seq_len, first.features.cols(), first.q.vocab());
        let store_k = match &first.q {
            TargetDist::Dense(_) => v,
            TargetDist::Sparse { k, .. } => *k,
        };
        let meta = json!({
            "mode": self.mode, "seq_len": s, "examples": n, "d_model": d, "vocab_size": v,
            "full_q": self.full_q(), "store_top_k": store_k,
        });
        let mut c = Container::new(DATASET_KIND, meta);
        let mut tokens = Vec::with_capacity(n * s);
        let mut feats = Vec::with_capacity(n * s * d);
        let (mut qi, mut qp) = (Vec::new(), Vec::new());
        for e in &self.examples {
            e.validate()?;
            if e.tokens.len() != s || e.features.cols() != d || e.q.is_full() != self.full_q() {
                bail!(Data, "dataset examples are not uniform");
            }
            tokens.extend_from_slice(&e.tokens);
            feats.extend_from_slice(e.features.data());
            match &e.q {
                TargetDist::Dense(t) => qp.extend_from_slice(t.data()),
                TargetDist::Sparse { indices, probs, .. } => {
                    qi.extend_from_slice(indices);
                    qp.extend_from_slice(probs);
                }
            }
        }
        c.push_u32("tokens", &[n, s], tokens);
        c.entries.push(Entry { name: "features".into(), shape: vec![n, s, d], payload: Payload::F32(feats) });
        if self.full_q() {
            c.entries.push(Entry { name: "q".into(), shape: vec![n, s, v], payload: Payload::F32(qp) });
        } else {
            c.push_u32("q_indices", &[n, s, store_k], qi);
            c.entries.push(Entry { name: "q_probs".into(), shape: vec![n, s, store_k], payload: Payload::F32(qp) });
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != DATASET_KIND {
            bail!(Format, "expected a dataset container, found {}", c.kind);
        }
        let field = |k: &str| c.meta[k].as_u64().map(|x| x as usize).ok_or_else(|| crate::HassError::Format(format!("dataset header lacks {k}")));
        let (n, s, d, v, k) = (field("examples")?, field("seq_len")?, field("d_model")?, field("vocab_size")?, field("store_top_k")?);
        let mode: DataMode = serde_json::from_value(c.meta["mode"].clone()).map_err(|e| crate::HassError::Format(e.to_string()))?;
        let full = c.meta["full_q"].as_bool().unwrap_or(false);
        let tokens = c.u32_data("tokens")?;
        let feats = c.f32_tensor("features")?;
        let q = if full { c.f32_tensor("q")?.into_data() } else { c.f32_tensor("q_probs")?.into_data() };
        let qi = if full { &[][..] } else { c.u32_data("q_indices")? };
        let kw = if full { v } else { k };
        if tokens.len() != n * s || feats.numel() != n * s * d || q.len() != n * s * kw || (!full && qi.len() != q.len()) {
            bail!(Format, "dataset tensors do not match the header");
        }
        let fd = feats.data();
        let examples = (0..n)
            .map(|e| {
                let features = Tensor::new(vec![s, d], fd[e * s * d..(e + 1) * s * d].to_vec())?;
                let probs = q[e * s * kw..(e + 1) * s * kw].to_vec();
                let q = if full {
                    TargetDist::Dense(Tensor::new(vec![s, v], probs)?)
                } else {
                    TargetDist::Sparse { vocab: v, k, indices: qi[e * s * k..(e + 1) * s * k].to_vec(), probs }
                };
                Ok(TrainingExample { tokens: tokens[e * s..(e + 1) * s].to_vec(), features, q })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mode, seq_len: s, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn target() -> TargetModel<f32> {
        let cfg = ModelConfig { vocab_size: 9, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 8, max_seq_len: 32, rms_norm_eps: 1e-5 };
        TargetModel::new(cfg, &mut Rng::new(2)).unwrap()
    }

    #[test]
    fn window_count_arithmetic() {
        for (len, s, stride) in [(256, 256, 128), (257, 256, 128), (1000, 256, 128), (384, 256, 128), (385, 256, 128)] {
            let w = window_starts(len, s, stride).unwrap();
            assert_eq!(w.len(), (len - s).div_ceil(stride) + 1);
            assert_eq!(*w.last().unwrap(), len - s);
            assert!(w.windows(2).all(|p| p[0] < p[1]));
        }
        assert!(matches!(window_starts(10, 16, 4), Err(crate::HassError::Data(_))));
    }

    #[test]
    fn distributions_are_normalized_and_modes_reproducible() {
        let t = target();
        let corpus: Vec<u32> = (0..60).map(|i| (i * 7 % 9) as u32).collect();
        let opts = DatasetOptions { seq_len: 16, stride: 8, store_top_k: 64, max_examples: None, prompt_len: 4 };
        for mode in [DataMode::Fixed, DataMode::SelfGenerated] {
            let a = build_dataset(mode, &corpus, &t, &opts, &mut Rng::new(5)).unwrap();
            assert_eq!(a.examples.len(), 7);
            for e in &a.examples {
                e.validate().unwrap();
                let TargetDist::Dense(q) = &e.q else { panic!("expected full rows") };
                for r in 0..q.rows() {
                    assert!((q.row(r).iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            let b = build_dataset(mode, &corpus, &t, &opts, &mut Rng::new(5)).unwrap();
            assert_eq!(a, b);
            if mode == DataMode::SelfGenerated {
                assert_eq!(a.examples[1].tokens[..4], corpus[8..12]);
            }
        }
    }

    #[test]
    fn cache_round_trip_dense_and_sparse() {
        let t = target();
        let corpus: Vec<u32> = (0..40).map(|i| (i * 5 % 9) as u32).collect();
        for k in [64, 3] {
            let opts = DatasetOptions { seq_len: 16, stride: 12, store_top_k: k, max_examples: None, prompt_len: 4 };
            let d = build_dataset(DataMode::Fixed, &corpus, &t, &opts, &mut Rng::new(1)).unwrap();
            assert_eq!(d.full_q(), k == 64);
            let back = Dataset::from_container(&Container::from_bytes(&d.to_container().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn truncated_rows_keep_the_top_entries() {
        let p = Tensor::from_rows(&[vec![0.1f32, 0.5, 0.1, 0.3]]).unwrap();
        let d = TargetDist::from_probs(p, 2);
        let mut row = [0.0f64; 4];
        d.write_row(0, &mut row);
        assert_eq!(row, [0.0, 0.5, 0.0, 0.30000001192092896]);
    }
}
