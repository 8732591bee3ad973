use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{compute_alpha, compute_tau, CycleMetrics};
use crate::drafting::{draft_chain, draft_tree_dynamic, tree_mask, DraftTree, Drafter, TreeParams};
use crate::error::{bail, Result};
use crate::model::{KvCache, TargetModel};
use crate::numerics::{argmax, Float, Rng, Tensor};
use crate::verification::{filter_logits, verify_chain, verify_tree, SamplingParams, VerifyResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One target forward per token.
    Vanilla,
    /// Auto-regressive draft chain of fixed length.
    Chain,
    /// Dynamic draft tree.
    #[default]
    Tree,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Chain => "chain",
            Method::Tree => "tree",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = crate::HassError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Method::Vanilla),
            "chain" => Ok(Method::Chain),
            "tree" => Ok(Method::Tree),
            _ => bail!(Config, "unknown method {s:?} (expected vanilla, chain or tree)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub method: Method,
    pub chain_len: usize,
    pub tree: TreeParams,
    pub max_new_tokens: usize,
    /// Generation stops after this token is emitted.
    pub stop_token: Option<u32>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { method: Method::Tree, chain_len: 6, tree: TreeParams::default(), max_new_tokens: 128, stop_token: None }
    }
}

/// Summary of one decode run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    /// Tokens emitted after the prompt (after trimming).
    pub new_tokens: usize,
    /// Tokens produced by cycles; the token sampled at prefill is not part
    /// of any cycle.
    pub cycle_tokens: usize,
    pub cycles: usize,
    pub total_secs: f64,
    /// Mean tokens per cycle, bonus token included.
    pub tau: f64,
    pub alpha: Vec<Option<f64>>,
    pub tokens_per_sec: f64,
    /// Throughput relative to a paired vanilla run, when one exists.
    pub speedup: Option<f64>,
    pub seed: u64,
    pub config: DecodeConfig,
}

/// Result of [`decode`].
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Generated tokens only (the prompt excluded).
    pub tokens: Vec<u32>,
    pub cycles: Vec<CycleMetrics>,
    pub report: RunReport,
}

/// Step-by-step decoder.
///
/// The target cache holds every committed position except the last
/// committed token, which is the root of the next draft. The drafter has
/// consumed every committed entry except the pending ones: the target
/// features and tokens of the positions committed by the last cycle.
pub struct Decoder<'a, T> {
    target: &'a TargetModel<T>,
    drafter: Option<&'a mut dyn Drafter<T>>,
    config: DecodeConfig,
    params: SamplingParams,
    rng: Rng,
    tokens: Vec<u32>,
    prompt_len: usize,
    cache: KvCache<T>,
    pending_features: Tensor<T>,
    pending_tokens: Vec<u32>,
    root_logits: Option<Vec<f64>>,
    cycles: Vec<CycleMetrics>,
    finished: bool,
    prefill_secs: f64,
}

fn pick(q: &[f64], greedy: bool, rng: &mut Rng) -> u32 {
    (if greedy { argmax(q) } else { rng.categorical(q) }) as u32
}

impl<'a, T: Float> Decoder<'a, T> {
    /// Runs the prompt through the target and samples the first token.
    pub fn new(
        prompt: &[u32],
        target: &'a TargetModel<T>,
        drafter: Option<&'a mut dyn Drafter<T>>,
        config: DecodeConfig,
        params: SamplingParams,
    ) -> Result<Self> {
        params.validate()?;
        if prompt.is_empty() {
            bail!(Parameter, "empty prompt");
        }
        let max_seq = target.config().max_seq_len;
        if prompt.len() + config.max_new_tokens > max_seq {
            bail!(Parameter, "prompt of {} tokens plus {} new tokens exceeds max_seq_len {max_seq}", prompt.len(), config.max_new_tokens);
        }
        if config.method != Method::Vanilla {
            if drafter.is_none() {
                bail!(Parameter, "{} decoding needs a drafter", config.method.name());
            }
            if config.method == Method::Chain && config.chain_len == 0 {
                bail!(Parameter, "chain length must be positive");
            }
            config.tree.validate()?;
        }
        let start = Instant::now();
        let mut rng = Rng::new(params.seed);
        let mut cache = target.new_cache();
        let (logits, hidden) = target.target_forward(prompt, &mut cache)?;
        let q = filter_logits(logits.row(prompt.len() - 1), &params)?;
        let first = pick(&q, params.is_greedy(), &mut rng);
        let mut tokens = prompt.to_vec();
        tokens.push(first);
        let d = hidden.cols();
        let pending_features = Tensor::from_fn(&[prompt.len() + 1, d], |e| if e < d { T::zero() } else { hidden.data()[e - d] });
        let mut pending_tokens = prompt.to_vec();
        pending_tokens.push(first);
        let mut dec = Self {
            target,
            drafter: if config.method == Method::Vanilla { None } else { drafter },
            config,
            params,
            rng,
            tokens,
            prompt_len: prompt.len(),
            cache,
            pending_features,
            pending_tokens,
            root_logits: None,
            cycles: Vec::new(),
            finished: false,
            prefill_secs: 0.0,
        };
        dec.check_finished();
        dec.prefill_secs = start.elapsed().as_secs_f64();
        Ok(dec)
    }

    fn check_finished(&mut self) {
        let new = &self.tokens[self.prompt_len..];
        if new.len() >= self.config.max_new_tokens {
            self.finished = true;
        }
        if let Some(stop) = self.config.stop_token {
            if let Some(i) = new.iter().position(|&t| t == stop) {
                self.tokens.truncate(self.prompt_len + i + 1);
                self.finished = true;
            }
        }
        self.tokens.truncate(self.prompt_len + self.config.max_new_tokens);
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Every committed token, prompt included.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn cycles(&self) -> &[CycleMetrics] {
        &self.cycles
    }

    pub fn target_cache(&self) -> &KvCache<T> {
        &self.cache
    }

    /// Feeds the pending entries to the drafter; returns the logits after
    /// the root. Idempotent until the next step.
    pub fn prime_drafter(&mut self) -> Result<Option<&[f64]>> {
        let Some(drafter) = self.drafter.as_deref_mut() else {
            return Ok(None);
        };
        if !self.pending_tokens.is_empty() {
            self.root_logits = Some(drafter.prime(&self.pending_features, &self.pending_tokens)?);
            self.pending_tokens.clear();
            self.pending_features = Tensor::zeros(&[0, self.target.config().d_model]);
        }
        Ok(self.root_logits.as_deref())
    }

    /// One drafting-verification cycle (a single target forward for
    /// vanilla decoding).
    pub fn step(&mut self) -> Result<&CycleMetrics> {
        if self.finished {
            bail!(Invariant, "step after decoding finished");
        }
        let greedy = self.params.is_greedy();
        let root = *self.tokens.last().expect("non-empty");
        let n = self.cache.len();
        let t0 = Instant::now();
        let tree = match self.config.method {
            Method::Vanilla => DraftTree::new(root),
            method => {
                self.prime_drafter()?;
                let root_logits = self.root_logits.take().expect("primed");
                let drafter = self.drafter.as_deref_mut().expect("drafter");
                let room = self.target.config().max_seq_len - n - 1;
                let tp = self.config.tree;
                let tree_fits = n + 1 + tp.budget.max(tp.branch * (tp.depth - 1)) <= self.target.config().max_seq_len;
                if method == Method::Tree && tree_fits {
                    draft_tree_dynamic(drafter, root, &root_logits, &tp, &self.params, &mut self.rng)?
                } else {
                    let len = if method == Method::Tree { tp.depth } else { self.config.chain_len }.min(room);
                    if len == 0 {
                        DraftTree::new(root)
                    } else {
                        draft_chain(drafter, root, &root_logits, len, &self.params, &mut self.rng)?
                    }
                }
            }
        };
        let draft_secs = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let positions: Vec<usize> = tree.nodes().iter().map(|nd| n + nd.depth).collect();
        let out = self.target.forward_cached(&tree.tokens(), &positions, &self.cache, Some(&tree_mask(&tree)))?;
        let q: Vec<Vec<f64>> = (0..tree.len()).map(|u| filter_logits(out.logits.row(u), &self.params)).collect::<Result<_>>()?;
        let res: VerifyResult = if tree.is_empty() {
            let bonus = pick(&q[0], greedy, &mut self.rng);
            VerifyResult { accepted: vec![], accepted_nodes: vec![], bonus, accepted_count: 0, depth_reached: vec![], depth_accepted: vec![] }
        } else if tree.is_chain() && self.config.method == Method::Chain {
            let l = tree.draft_len();
            let drafted: Vec<u32> = tree.tokens()[1..].to_vec();
            verify_chain(&drafted, &tree.dists()[..l], &q, &self.params, &mut self.rng)?
        } else {
            verify_tree(&tree, &q, &self.params, &mut self.rng)?
        };

        let mut keep = vec![0];
        keep.extend(&res.accepted_nodes);
        self.cache.append(&out.new_kv, Some(&keep))?;
        self.tokens.extend(res.emitted());
        if self.drafter.is_some() {
            self.pending_features = out.hidden.select_rows(&keep);
            self.pending_tokens = res.emitted();
            if let Some(d) = self.drafter.as_deref_mut() {
                d.rollback();
            }
        }
        let verify_secs = t1.elapsed().as_secs_f64();
        self.cycles.push(CycleMetrics {
            cycle: self.cycles.len(),
            drafted: tree.draft_len(),
            tokens_generated: res.tokens_generated(),
            accepted: res.accepted.clone(),
            bonus: res.bonus,
            depth_reached: res.depth_reached,
            depth_accepted: res.depth_accepted,
            draft_secs,
            verify_secs,
        });
        self.check_finished();
        Ok(self.cycles.last().expect("pushed"))
    }

    /// Runs to completion.
    pub fn run(mut self) -> Result<DecodeOutput> {
        while !self.finished {
            self.step()?;
        }
        let total_secs =
            self.prefill_secs + self.cycles.iter().map(|c| c.draft_secs + c.verify_secs).sum::<f64>();
        let new_tokens = self.tokens.len() - self.prompt_len;
        let max_step = match self.config.method {
            Method::Vanilla => 0,
            Method::Chain => self.config.chain_len,
            Method::Tree => self.config.tree.depth,
        };
        let report = RunReport {
            method: self.config.method,
            new_tokens,
            cycle_tokens: self.cycles.iter().map(|c| c.tokens_generated).sum(),
            cycles: self.cycles.len(),
            total_secs,
            tau: if self.cycles.is_empty() { 1.0 } else { compute_tau(&self.cycles)? },
            alpha: compute_alpha(&self.cycles, max_step),
            tokens_per_sec: if total_secs > 0.0 { new_tokens as f64 / total_secs } else { 0.0 },
            speedup: None,
            seed: self.params.seed,
            config: self.config.clone(),
        };
        Ok(DecodeOutput { tokens: self.tokens[self.prompt_len..].to_vec(), cycles: self.cycles, report })
    }
}

/// Generates up to `config.max_new_tokens` tokens after `prompt`.
pub fn decode<'a, T: Float>(
    prompt: &[u32],
    target: &'a TargetModel<T>,
    drafter: Option<&'a mut dyn Drafter<T>>,
    config: &DecodeConfig,
    params: &SamplingParams,
) -> Result<DecodeOutput> {
    Decoder::new(prompt, target, drafter, config.clone(), params.clone())?.run()
}
