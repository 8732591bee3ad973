use super::loss::forward_loss;
use super::{AlignmentPlan, LossWeights, TrainConfig, TrainingExample};
use crate::error::{bail, Result};
use crate::model::{DraftHead, DraftVars};
use crate::numerics::{argmax, Float, Graph, Tensor, Var};

/// Stacked windows ready for an aligned training step.
pub struct Batch<T> {
    pub ids: Vec<usize>,
    /// Target features, `batch * seq_len` rows.
    pub features: Tensor<T>,
    /// Target next-token distributions, one row per position.
    pub q: Tensor<T>,
    pub batch: usize,
    pub seq_len: usize,
}

impl<T: Float> Batch<T> {
    pub fn from_examples(examples: &[&TrainingExample]) -> Result<Self> {
        let Some(first) = examples.first() else {
            bail!(Data, "empty batch");
        };
        let (s, d, v) = (first.tokens.len(), first.features.cols(), first.q.vocab());
        let rows = examples.len() * s;
        let mut ids = Vec::with_capacity(rows);
        let mut features = Tensor::zeros(&[rows, d]);
        let mut q = Tensor::zeros(&[rows, v]);
        for (b, e) in examples.iter().enumerate() {
            e.validate()?;
            if e.tokens.len() != s || e.features.cols() != d || e.q.vocab() != v {
                bail!(Shape, "batch examples differ in shape");
            }
            ids.extend(e.tokens.iter().map(|&t| t as usize));
            for r in 0..s {
                features.row_mut(b * s + r).iter_mut().zip(e.features.row(r)).for_each(|(o, &x)| *o = T::of(x as f64));
                e.q.write_row(r, q.row_mut(b * s + r));
            }
        }
        Ok(Self { ids, features, q, batch: examples.len(), seq_len: s })
    }
}

/// Outputs of one aligned forward.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AlignedVars {
    pub features: Var,
    pub logits: Var,
}

/// Row index of the feature preceding each position (none at a window
/// start, where the input feature is zero).
fn previous_rows(batch: usize, seq_len: usize) -> Vec<Option<usize>> {
    (0..batch * seq_len).map(|r| if r % seq_len == 0 { None } else { Some(r - 1) }).collect()
}

/// Runs forwards `1..=plan.steps()` over the batch. Forward 1 reads the
/// target's features; forward `j > 1` reads forward `j - 1`'s predicted
/// features and attends over the keys and values of every earlier forward
/// under the staircase mask.
#[allow(clippy::too_many_arguments)]
pub(crate) fn aligned_forwards<T: Float>(
    g: &mut Graph<T>,
    head: &DraftHead<T>,
    vars: &DraftVars,
    plan: &AlignmentPlan,
    ids: &[usize],
    target_features: Var,
    batch: usize,
    detach: bool,
) -> Result<Vec<AlignedVars>> {
    let s = plan.seq_len();
    if ids.len() != batch * s {
        bail!(Shape, "{} tokens for a batch of {} windows of {}", ids.len(), batch, s);
    }
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..s).collect();
    let prev = previous_rows(batch, s);
    let mut input = g.gather_rows(target_features, &prev)?;
    let mut past: Vec<(Var, Var)> = Vec::with_capacity(plan.steps());
    let mut outs = Vec::with_capacity(plan.steps());
    for j in 1..=plan.steps() {
        let out = head.forward_graph(g, vars, input, ids, &positions, batch, &past, plan.attention_mask(j))?;
        outs.push(AlignedVars { features: out.feature, logits: out.logits });
        if j == plan.steps() {
            break;
        }
        let (k, v, f) = if detach {
            (g.detach(out.k), g.detach(out.v), g.detach(out.feature))
        } else {
            (out.k, out.v, out.feature)
        };
        past.push((k, v));
        input = g.gather_rows(f, &prev)?;
    }
    Ok(outs)
}

/// Features and logits of an aligned forward.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedOutput<T> {
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Inference-only aligned forward pass over one window: element `j - 1`
/// holds forward `j`'s outputs. Rows before position `j - 1` of forward
/// `j` carry no meaning.
pub fn hass_forward_pass<T: Float>(
    tokens: &[u32],
    target_features: &Tensor<T>,
    head: &DraftHead<T>,
    steps: usize,
) -> Result<Vec<AlignedOutput<T>>> {
    let plan = AlignmentPlan::new(steps, tokens.len())?;
    if target_features.rows() != tokens.len() {
        bail!(Shape, "{} feature rows for {} tokens", target_features.rows(), tokens.len());
    }
    let ids = crate::model::token_ids(tokens, head.config().vocab_size)?;
    let mut g = Graph::no_grad();
    let vars = head.bind(&mut g, false);
    let f = g.constant(target_features.clone());
    let outs = aligned_forwards(&mut g, head, &vars, &plan, &ids, f, 1, true)?;
    Ok(outs
        .into_iter()
        .map(|o| AlignedOutput { features: g.value(o.features).clone(), logits: g.value(o.logits).clone() })
        .collect())
}

/// Loss statistics of one forward within a step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardStats {
    pub total: f64,
    pub reg: f64,
    pub cls: f64,
    pub top_k: f64,
    /// Share of eligible positions where the draft's top token is the
    /// target's top token.
    pub top1: f64,
}

/// Builds the summed loss of all forwards for one batch.
pub(crate) fn batch_loss<T: Float>(
    g: &mut Graph<T>,
    head: &DraftHead<T>,
    vars: &DraftVars,
    plan: &AlignmentPlan,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<(Var, Vec<ForwardStats>)> {
    let f_l = g.constant(batch.features.clone());
    let outs = aligned_forwards(g, head, vars, plan, &batch.ids, f_l, batch.batch, cfg.detach_between_forwards)?;
    let weights = LossWeights { reg: cfg.reg_weight, cls: cfg.cls_weight, top_k: cfg.top_k_weight, k: cfg.top_k };
    let s = batch.seq_len;
    let mut total: Option<Var> = None;
    let mut stats = Vec::with_capacity(outs.len());
    for (jm1, o) in outs.iter().enumerate() {
        let j = jm1 + 1;
        let count = (batch.batch * plan.eligible_per_sequence(j)) as f64;
        let scale: Vec<T> =
            (0..batch.batch * s).map(|r| if plan.is_eligible(j, r % s) { T::of(1.0 / count) } else { T::zero() }).collect();
        let (loss, terms) = forward_loss(g, o.features, o.logits, f_l, &batch.q, &scale, &weights)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().f64());
        let logits = g.value(o.logits);
        let hits = (0..batch.batch * s)
            .filter(|&r| plan.is_eligible(j, r % s) && argmax(logits.row(r)) == argmax(batch.q.row(r)))
            .count();
        stats.push(ForwardStats {
            total: value(loss),
            reg: value(terms.reg),
            cls: value(terms.cls),
            top_k: value(terms.top_k),
            top1: hits as f64 / count,
        });
        if let Some(l) = loss {
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
    }
    match total {
        Some(t) => Ok((t, stats)),
        None => bail!(Config, "every loss weight is zero"),
    }
}

/// Summed aligned loss of a batch, without gradients.
pub fn batch_loss_value<T: Float>(head: &DraftHead<T>, batch: &Batch<T>, cfg: &TrainConfig) -> Result<f64> {
    let plan = AlignmentPlan::new(cfg.align_steps, batch.seq_len)?;
    let mut g = Graph::no_grad();
    let vars = head.bind(&mut g, false);
    let (loss, _) = batch_loss(&mut g, head, &vars, &plan, batch, cfg)?;
    Ok(g.value(loss).item().f64())
}

/// Summed aligned loss, per-forward statistics, and the gradient of every
/// trainable parameter (in [`DraftHead::trainable_params_mut`] order).
pub fn batch_loss_and_grads<T: Float>(
    head: &DraftHead<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<ForwardStats>, Vec<Option<Vec<T>>>)> {
    let plan = AlignmentPlan::new(cfg.align_steps, batch.seq_len)?;
    let mut g = Graph::new();
    let vars = head.bind(&mut g, true);
    let (loss, stats) = batch_loss(&mut g, head, &vars, &plan, batch, cfg)?;
    let value = g.value(loss).item().f64();
    g.backward(loss)?;
    let grads = vars.trainable().into_iter().map(|v| g.take_grad(v)).collect();
    Ok((value, stats, grads))
}
