use std::sync::Arc;

use super::target::lm_logits;
use super::{
    block_forward, normal_param, prefixed_mask, token_ids, AttnContext, BlockParams, BlockVars, KvCache, LayerKv,
    ModelConfig, Param, TargetModel, BLOCK_PARAM_NAMES, INIT_STD,
};
use crate::error::{bail, Result};
use crate::numerics::{AttnMask, BoolMatrix, Float, Graph, Rng, Tensor, Var};

/// Weights the draft head borrows from the target model.
#[derive(Clone, Debug)]
pub struct SharedHead<T> {
    pub embed: Param<T>,
    pub final_norm: Param<T>,
    pub lm_head: Param<T>,
}

/// Single-block draft head. The input at position `t` is
/// `concat(f_{t-1}, e_t)`, projected back to `d_model` and passed through
/// one decoder block. Its output is the predicted feature, and logits come
/// from the target's final norm and LM head.
#[derive(Clone, Debug)]
pub struct DraftHead<T> {
    config: ModelConfig,
    pub fuse_w: Param<T>,
    pub fuse_b: Param<T>,
    pub block: BlockParams<T>,
    pub shared: SharedHead<T>,
    train_embedding: bool,
}

#[derive(Clone, Debug)]
pub struct DraftOutput<T> {
    pub logits: Tensor<T>,
    pub features: Tensor<T>,
    pub new_kv: LayerKv<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct DraftVars {
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub block: BlockVars,
    pub embed: Var,
    pub final_norm: Var,
    pub lm_head: Var,
    train_embedding: bool,
}

impl DraftVars {
    /// Same order as [`DraftHead::trainable_params_mut`].
    pub fn trainable(&self) -> Vec<Var> {
        let mut v = vec![self.fuse_w, self.fuse_b];
        v.extend(self.block.all());
        if self.train_embedding {
            v.push(self.embed);
        }
        v
    }
}

pub(crate) struct DraftGraphOut {
    pub feature: Var,
    pub logits: Var,
    pub k: Var,
    pub v: Var,
}

impl<T: Float> DraftHead<T> {
    pub fn new(target: &TargetModel<T>, rng: &mut Rng) -> Self {
        let config = target.config().clone();
        let d = config.d_model;
        Self {
            fuse_w: normal_param(&[2 * d, d], INIT_STD, rng),
            fuse_b: Arc::new(Tensor::zeros(&[d])),
            block: BlockParams::init(d, config.d_ff, INIT_STD, 1.0 / 2f64.sqrt(), rng),
            shared: target.shared_head(),
            train_embedding: false,
            config,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Whether the embedding table is updated during training. Enabling it
    /// gives the head a private copy so the target is never modified.
    pub fn train_embedding(&self) -> bool {
        self.train_embedding
    }

    pub fn set_train_embedding(&mut self, on: bool) {
        if on && !self.train_embedding {
            self.shared.embed = Arc::new((*self.shared.embed).clone());
        }
        self.train_embedding = on;
    }

    /// True when the frozen weights are the target's own tensors.
    pub fn shares_weights_with(&self, target: &TargetModel<T>) -> bool {
        Arc::ptr_eq(&self.shared.final_norm, &target.final_norm)
            && Arc::ptr_eq(&self.shared.lm_head, &target.lm_head)
            && (self.train_embedding || Arc::ptr_eq(&self.shared.embed, &target.embed))
    }

    /// Names of the head's own tensors in canonical order.
    pub fn param_names(train_embedding: bool) -> Vec<String> {
        let mut names = vec!["fuse_w".to_string(), "fuse_b".to_string()];
        names.extend(BLOCK_PARAM_NAMES.iter().map(|n| format!("block.{n}")));
        if train_embedding {
            names.push("embed".into());
        }
        names
    }

    pub fn own_params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.fuse_w, &self.fuse_b];
        v.extend(self.block.params());
        if self.train_embedding {
            v.push(&self.shared.embed);
        }
        v
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.fuse_w, &mut self.fuse_b];
        v.extend(self.block.params_mut());
        if self.train_embedding {
            v.push(&mut self.shared.embed);
        }
        v
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        Self::param_names(self.train_embedding).into_iter().zip(self.own_params()).collect()
    }

    /// Rebuilds a head from its own tensors, attached to `target`.
    pub fn from_params(target: &TargetModel<T>, params: Vec<Param<T>>, train_embedding: bool) -> Result<Self> {
        let mut template = Self::new(target, &mut Rng::new(0));
        template.set_train_embedding(train_embedding);
        let names = Self::param_names(train_embedding);
        if params.len() != names.len() {
            bail!(Load, "expected {} draft tensors, got {}", names.len(), params.len());
        }
        for ((name, want), got) in names.iter().zip(template.own_params()).zip(&params) {
            if want.shape() != got.shape() {
                bail!(Load, "tensor {name}: expected shape {:?}, got {:?}", want.shape(), got.shape());
            }
        }
        let mut it = params.into_iter();
        template.fuse_w = it.next().expect("length checked");
        template.fuse_b = it.next().expect("length checked");
        template.block = BlockParams::from_params(&mut it).expect("length checked");
        if train_embedding {
            template.shared.embed = it.next().expect("length checked");
        }
        Ok(template)
    }

    /// Trainable parameter count, excluding the borrowed weights.
    pub fn num_params(&self) -> usize {
        let mut n = self.fuse_w.numel() + self.fuse_b.numel();
        n += self.block.params().iter().map(|p| p.numel()).sum::<usize>();
        n
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(1, self.config.d_model, self.config.max_seq_len)
    }

    pub(crate) fn bind(&self, g: &mut Graph<T>, trainable: bool) -> DraftVars {
        DraftVars {
            fuse_w: g.leaf_arc(Arc::clone(&self.fuse_w), trainable),
            fuse_b: g.leaf_arc(Arc::clone(&self.fuse_b), trainable),
            block: self.block.bind(g, trainable),
            embed: g.leaf_arc(Arc::clone(&self.shared.embed), trainable && self.train_embedding),
            final_norm: g.leaf_arc(Arc::clone(&self.shared.final_norm), false),
            lm_head: g.leaf_arc(Arc::clone(&self.shared.lm_head), false),
            train_embedding: self.train_embedding,
        }
    }

    /// Graph forward. `features` row `t` is the feature preceding token
    /// `ids[t]`. `past` lists key/value blocks visible before this
    /// forward's own rows.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &DraftVars,
        features: Var,
        ids: &[usize],
        positions: &[usize],
        batch: usize,
        past: &[(Var, Var)],
        mask: &Arc<AttnMask>,
    ) -> Result<DraftGraphOut> {
        let (rows, _) = g.value(features).dims2()?;
        if rows != ids.len() {
            bail!(Shape, "{} feature rows for {} tokens", rows, ids.len());
        }
        let e = g.embedding(vars.embed, ids)?;
        let x = g.concat_cols(features, e)?;
        let x = g.matmul(x, vars.fuse_w)?;
        let x = g.add_row(x, vars.fuse_b)?;
        let ctx = AttnContext {
            positions,
            batch,
            n_heads: self.config.n_heads,
            eps: self.config.rms_norm_eps,
            past,
            mask,
        };
        let out = block_forward(g, &vars.block, x, &ctx)?;
        let logits = lm_logits(g, vars.final_norm, vars.lm_head, out.out, self.config.rms_norm_eps)?;
        Ok(DraftGraphOut { feature: out.out, logits, k: out.k, v: out.v })
    }

    /// Cached forward: new rows attend to every cached position and to
    /// each other under `mask` (causal when `None`). The cache is not
    /// modified.
    pub fn draft_forward(
        &self,
        features: &Tensor<T>,
        tokens: &[u32],
        positions: &[usize],
        cache: &KvCache<T>,
        mask: Option<&BoolMatrix>,
    ) -> Result<DraftOutput<T>> {
        let mask = prefixed_mask(cache.len(), tokens.len(), mask)?;
        self.forward_masked(features, tokens, positions, cache, mask)
    }

    /// Forward with an explicit mask over the cached keys followed by the
    /// new rows.
    pub fn forward_masked(
        &self,
        features: &Tensor<T>,
        tokens: &[u32],
        positions: &[usize],
        cache: &KvCache<T>,
        mask: Arc<AttnMask>,
    ) -> Result<DraftOutput<T>> {
        let s = tokens.len();
        let (rows, width) = features.dims2()?;
        if rows != s || width != self.config.d_model {
            bail!(Shape, "features {:?} for {} tokens of width {}", features.shape(), s, self.config.d_model);
        }
        if s == 0 || positions.len() != s || mask.queries() != s || mask.keys() != cache.len() + s {
            bail!(Shape, "{} tokens, {} positions and a {}x{} mask over {} cached keys", s, positions.len(), mask.queries(), mask.keys(), cache.len());
        }
        if cache.len() + s > cache.capacity() || positions.iter().any(|&p| p >= self.config.max_seq_len) {
            bail!(Capacity, "{} cached + {} new draft positions exceed capacity {}", cache.len(), s, cache.capacity());
        }
        let ids = token_ids(tokens, self.config.vocab_size)?;
        let mut g = Graph::no_grad();
        let vars = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let (k, v) = cache.layer(0);
        let past = [(g.leaf_arc(Arc::clone(k), false), g.leaf_arc(Arc::clone(v), false))];
        let out = self.forward_graph(&mut g, &vars, f, &ids, positions, 1, &past, &mask)?;
        Ok(DraftOutput {
            logits: g.value(out.logits).clone(),
            features: g.value(out.feature).clone(),
            new_kv: vec![(g.value_arc(out.k), g.value_arc(out.v))],
        })
    }

    /// Same weights at another precision, attached to `target`.
    pub fn cast_onto<U: Float>(&self, target: &TargetModel<U>) -> DraftHead<U> {
        let params = self.own_params().into_iter().map(|p| Arc::new(p.cast::<U>())).collect();
        DraftHead::from_params(target, params, self.train_embedding).expect("shapes preserved")
    }
}
