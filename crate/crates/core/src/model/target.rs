use std::sync::Arc;

use super::{
    block_forward, normal_param, ones_param, prefixed_mask, token_ids, AttnContext, BlockParams, BlockVars, KvCache,
    LayerKv, ModelConfig, Param, SharedHead, BLOCK_PARAM_NAMES, INIT_STD,
};
use crate::error::{bail, Result};
use crate::numerics::{AttnMask, BoolMatrix, Float, Graph, Rng, Tensor, Var};

/// Decoder-only transformer: embedding, pre-norm blocks, final RMS norm
/// and an untied LM head.
#[derive(Clone, Debug)]
pub struct TargetModel<T> {
    config: ModelConfig,
    pub embed: Param<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Param<T>,
    pub lm_head: Param<T>,
}

/// Result of a cached forward over new tokens.
#[derive(Clone, Debug)]
pub struct TargetOutput<T> {
    pub logits: Tensor<T>,
    /// Feature passed to the draft head: the last block's output, before
    /// the final norm.
    pub hidden: Tensor<T>,
    /// Keys and values of the new tokens, one pair per layer.
    pub new_kv: LayerKv<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct TargetVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl TargetVars {
    /// Same order as [`TargetModel::params_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        self.blocks.iter().for_each(|b| v.extend(b.all()));
        v.push(self.final_norm);
        v.push(self.lm_head);
        v
    }
}

pub(crate) struct TargetGraphOut {
    pub logits: Var,
    pub hidden: Var,
    pub kv: Vec<(Var, Var)>,
}

/// The draft head's input feature is taken from here: the output of the
/// final block, before the final norm.
pub(crate) fn extract_feature(block_outputs: &[Var]) -> Var {
    *block_outputs.last().expect("at least one block")
}

/// `final_norm(f) . W_lm`, shared by the target and the draft head.
pub(crate) fn lm_logits<T: Float>(g: &mut Graph<T>, final_norm: Var, lm_head: Var, f: Var, eps: f64) -> Result<Var> {
    let h = g.rms_norm(f, final_norm, eps)?;
    g.matmul(h, lm_head)
}

impl<T: Float> TargetModel<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let embed = normal_param(&[v, d], INIT_STD, rng);
        let blocks = (0..config.n_layers).map(|_| BlockParams::init(d, config.d_ff, INIT_STD, out_scale, rng)).collect();
        let lm_head = normal_param(&[d, v], INIT_STD, rng);
        Ok(Self { embed, blocks, final_norm: ones_param(d), lm_head, config })
    }

    /// Every weight set to zero (norm scales included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, &mut Rng::new(0))?;
        for p in m.params_mut() {
            *p = Arc::new(Tensor::zeros(p.shape()));
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter names in canonical order.
    pub fn param_names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["embed".to_string()];
        for l in 0..config.n_layers {
            names.extend(BLOCK_PARAM_NAMES.iter().map(|n| format!("blocks.{l}.{n}")));
        }
        names.push("final_norm".into());
        names.push("lm_head".into());
        names
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.embed];
        self.blocks.iter().for_each(|b| v.extend(b.params()));
        v.push(&self.final_norm);
        v.push(&self.lm_head);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.embed];
        self.blocks.iter_mut().for_each(|b| v.extend(b.params_mut()));
        v.push(&mut self.final_norm);
        v.push(&mut self.lm_head);
        v
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        Self::param_names(&self.config).into_iter().zip(self.params()).collect()
    }

    /// Rebuilds a model from tensors in canonical order, checking shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        let template = Self::new(config.clone(), &mut Rng::new(0))?;
        let names = Self::param_names(&config);
        if params.len() != names.len() {
            bail!(Load, "expected {} target tensors, got {}", names.len(), params.len());
        }
        for ((name, want), got) in names.iter().zip(template.params()).zip(&params) {
            if want.shape() != got.shape() {
                bail!(Load, "tensor {name}: expected shape {:?}, got {:?}", want.shape(), got.shape());
            }
        }
        let mut it = params.into_iter();
        let embed = it.next().expect("length checked");
        let blocks = (0..config.n_layers).map(|_| BlockParams::from_params(&mut it).expect("length checked")).collect();
        let final_norm = it.next().expect("length checked");
        let lm_head = it.next().expect("length checked");
        Ok(Self { config, embed, blocks, final_norm, lm_head })
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn block_params(&self) -> usize {
        self.blocks[0].params().iter().map(|p| p.numel()).sum()
    }

    /// Handles to the embedding, final norm and LM head.
    pub fn shared_head(&self) -> SharedHead<T> {
        SharedHead {
            embed: Arc::clone(&self.embed),
            final_norm: Arc::clone(&self.final_norm),
            lm_head: Arc::clone(&self.lm_head),
        }
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self.config.n_layers, self.config.d_model, self.config.max_seq_len)
    }

    /// Same weights at another precision.
    pub fn cast<U: Float>(&self) -> TargetModel<U> {
        let params = self.params().into_iter().map(|p| Arc::new(p.cast::<U>())).collect();
        TargetModel::from_params(self.config.clone(), params).expect("shapes preserved")
    }

    pub(crate) fn bind(&self, g: &mut Graph<T>, trainable: bool) -> TargetVars {
        TargetVars {
            embed: g.leaf_arc(Arc::clone(&self.embed), trainable),
            blocks: self.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            final_norm: g.leaf_arc(Arc::clone(&self.final_norm), trainable),
            lm_head: g.leaf_arc(Arc::clone(&self.lm_head), trainable),
        }
    }

    /// Graph forward over `batch` sequences laid out back to back.
    /// `past` holds one cached key/value pair per layer, or is empty.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &TargetVars,
        ids: &[usize],
        positions: &[usize],
        batch: usize,
        past: &[(Var, Var)],
        mask: &Arc<AttnMask>,
    ) -> Result<TargetGraphOut> {
        let mut x = g.embedding(vars.embed, ids)?;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut kv = Vec::with_capacity(self.blocks.len());
        for (l, bv) in vars.blocks.iter().enumerate() {
            let ctx = AttnContext {
                positions,
                batch,
                n_heads: self.config.n_heads,
                eps: self.config.rms_norm_eps,
                past: past.get(l..l + 1).unwrap_or(&[]),
                mask,
            };
            let out = block_forward(g, bv, x, &ctx)?;
            x = out.out;
            outputs.push(out.out);
            kv.push((out.k, out.v));
        }
        let hidden = extract_feature(&outputs);
        let logits = lm_logits(g, vars.final_norm, vars.lm_head, hidden, self.config.rms_norm_eps)?;
        Ok(TargetGraphOut { logits, hidden, kv })
    }

    /// Forward over new tokens at explicit positions, attending to every
    /// cached position plus the new tokens under `mask` (causal when
    /// `None`). The cache is not modified.
    pub fn forward_cached(
        &self,
        tokens: &[u32],
        positions: &[usize],
        cache: &KvCache<T>,
        mask: Option<&BoolMatrix>,
    ) -> Result<TargetOutput<T>> {
        let mask = prefixed_mask(cache.len(), tokens.len(), mask)?;
        self.forward_masked(tokens, positions, cache, mask)
    }

    /// Forward with an explicit mask over the cached keys followed by the
    /// new tokens.
    pub fn forward_masked(
        &self,
        tokens: &[u32],
        positions: &[usize],
        cache: &KvCache<T>,
        mask: Arc<AttnMask>,
    ) -> Result<TargetOutput<T>> {
        let s = tokens.len();
        if s == 0 || positions.len() != s || mask.queries() != s || mask.keys() != cache.len() + s {
            bail!(
                Shape,
                "{} tokens, {} positions and a {}x{} mask over {} cached keys",
                s,
                positions.len(),
                mask.queries(),
                mask.keys(),
                cache.len()
            );
        }
        if cache.n_layers() != self.config.n_layers {
            bail!(Shape, "cache has {} layers, model has {}", cache.n_layers(), self.config.n_layers);
        }
        if cache.len() + s > cache.capacity().min(self.config.max_seq_len)
            || positions.iter().any(|&p| p >= self.config.max_seq_len)
        {
            bail!(Capacity, "{} cached + {} new positions exceed max_seq_len {}", cache.len(), s, self.config.max_seq_len);
        }
        let ids = token_ids(tokens, self.config.vocab_size)?;
        let mut g = Graph::no_grad();
        let vars = self.bind(&mut g, false);
        let past: Vec<(Var, Var)> = (0..self.config.n_layers)
            .map(|l| {
                let (k, v) = cache.layer(l);
                (g.leaf_arc(Arc::clone(k), false), g.leaf_arc(Arc::clone(v), false))
            })
            .collect();
        let out = self.forward_graph(&mut g, &vars, &ids, positions, 1, &past, &mask)?;
        let new_kv = out.kv.iter().map(|&(k, v)| (g.value_arc(k), g.value_arc(v))).collect();
        Ok(TargetOutput { logits: g.value(out.logits).clone(), hidden: g.value(out.hidden).clone(), new_kv })
    }

    /// Causal forward continuing the cache; the cache grows by `S`.
    pub fn target_forward(&self, tokens: &[u32], cache: &mut KvCache<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let start = cache.len();
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let out = self.forward_cached(tokens, &positions, cache, None)?;
        cache.append(&out.new_kv, None)?;
        Ok((out.logits, out.hidden))
    }

    /// Single-shot forward over a whole sequence with a fresh cache.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<(Tensor<T>, Tensor<T>)> {
        self.target_forward(tokens, &mut self.new_cache())
    }

    /// LM head applied to features.
    pub fn logits_from_hidden(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let f = g.constant(hidden.clone());
        let n = g.leaf_arc(Arc::clone(&self.final_norm), false);
        let w = g.leaf_arc(Arc::clone(&self.lm_head), false);
        let out = lm_logits(&mut g, n, w, f, self.config.rms_norm_eps)?;
        Ok(g.value(out).clone())
    }
}
