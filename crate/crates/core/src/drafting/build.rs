use serde::{Deserialize, Serialize};

use super::{DraftTree, Drafter};
use crate::error::{bail, Result};
use crate::numerics::{argmax, Float, Rng};
use crate::verification::{filter_logits, softmax_f64, SamplingParams};

/// How children of an expanded tree node are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildMode {
    /// The `branch` most probable tokens (ties to the lower id).
    #[default]
    TopM,
    /// `branch` i.i.d. draws from the node distribution, duplicates kept.
    /// Nodes are never pruned by score in this mode.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeParams {
    pub budget: usize,
    pub depth: usize,
    pub branch: usize,
    pub mode: ChildMode,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { budget: 60, depth: 6, branch: 10, mode: ChildMode::TopM }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.branch == 0 {
            bail!(Parameter, "tree depth and branch must be positive");
        }
        if self.budget < self.depth {
            bail!(Parameter, "tree budget {} is below depth {}", self.budget, self.depth);
        }
        Ok(())
    }
}

/// Distribution drafted tokens are drawn from. Greedy decoding still needs
/// scores, so it uses the unfiltered softmax at temperature 1.
pub fn draft_dist(logits: &[f64], params: &SamplingParams) -> Result<Vec<f64>> {
    if params.is_greedy() {
        Ok(softmax_f64(logits, 1.0))
    } else {
        filter_logits(logits, params)
    }
}

fn pick(p: &[f64], greedy: bool, rng: &mut Rng) -> usize {
    if greedy {
        argmax(p)
    } else {
        rng.categorical(p)
    }
}

/// Drafts `len` tokens auto-regressively after the root. Step `k > 1` is
/// conditioned on the drafter's own output at step `k - 1`.
pub fn draft_chain<T: Float, D: Drafter<T> + ?Sized>(
    drafter: &mut D,
    root_token: u32,
    root_logits: &[f64],
    len: usize,
    params: &SamplingParams,
    rng: &mut Rng,
) -> Result<DraftTree> {
    if len == 0 {
        bail!(Parameter, "chain length must be positive");
    }
    if drafter.committed_len() + len > drafter.capacity() {
        bail!(Capacity, "chain of {len} after {} committed positions exceeds {}", drafter.committed_len(), drafter.capacity());
    }
    let mut tree = DraftTree::new(root_token);
    let mut p = draft_dist(root_logits, params)?;
    for k in 1..=len {
        let tok = pick(&p, params.is_greedy(), rng);
        let prob = p[tok];
        tree.set_dist(k - 1, std::mem::take(&mut p));
        tree.push(k - 1, tok as u32, prob)?;
        if k < len {
            let parent = if k == 1 { None } else { Some(k - 2) };
            let logits = drafter.speculate(&[tok as u32], &[parent])?;
            p = draft_dist(&logits[0], params)?;
        }
    }
    Ok(tree)
}

struct Candidate {
    parent: usize,
    token: u32,
    prob: f64,
    score: f64,
    /// Index among the drafter's speculative nodes once expanded.
    spec: Option<usize>,
}

/// Indices sorted by score descending, ties by insertion order.
fn by_score(cands: &[Candidate], idx: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = idx.collect();
    v.sort_by(|&a, &b| cands[b].score.total_cmp(&cands[a].score).then(a.cmp(&b)));
    v
}

fn choose_children(p: &[f64], branch: usize, mode: ChildMode, rng: &mut Rng) -> Vec<usize> {
    match mode {
        ChildMode::TopM => {
            let mut ids: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
            ids.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            ids.truncate(branch);
            ids
        }
        ChildMode::Sampled => (0..branch).map(|_| rng.categorical(p)).collect(),
    }
}

/// Builds a draft tree layer by layer: each layer expands the `branch`
/// frontier nodes with the highest path score, then the best `budget`
/// nodes overall are kept with their ancestors.
pub fn draft_tree_dynamic<T: Float, D: Drafter<T> + ?Sized>(
    drafter: &mut D,
    root_token: u32,
    root_logits: &[f64],
    tree: &TreeParams,
    params: &SamplingParams,
    rng: &mut Rng,
) -> Result<DraftTree> {
    tree.validate()?;
    let spec_needed = tree.branch * (tree.depth - 1);
    let max_nodes = tree.branch + spec_needed * tree.branch;
    if drafter.committed_len() + tree.budget.min(max_nodes).max(spec_needed) > drafter.capacity() {
        bail!(
            Capacity,
            "tree of budget {} after {} committed positions exceeds {}",
            tree.budget,
            drafter.committed_len(),
            drafter.capacity()
        );
    }
    let mut cands = vec![Candidate { parent: 0, token: root_token, prob: 1.0, score: 1.0, spec: None }];
    let mut dists = vec![draft_dist(root_logits, params)?];
    let add_children = |cands: &mut Vec<Candidate>, dists: &mut Vec<Vec<f64>>, u: usize, rng: &mut Rng| {
        let kids = choose_children(&dists[u], tree.branch, tree.mode, rng);
        let start = cands.len();
        for tok in kids {
            let prob = dists[u][tok];
            let score = cands[u].score * prob;
            cands.push(Candidate { parent: u, token: tok as u32, prob, score, spec: None });
            dists.push(Vec::new());
        }
        start..cands.len()
    };
    let mut layer: Vec<usize> = add_children(&mut cands, &mut dists, 0, rng).collect();
    let mut n_spec = 0;
    for _ in 2..=tree.depth {
        let mut frontier = by_score(&cands, layer.iter().copied());
        frontier.truncate(tree.branch);
        if frontier.is_empty() {
            break;
        }
        let tokens: Vec<u32> = frontier.iter().map(|&c| cands[c].token).collect();
        let parents: Vec<Option<usize>> = frontier
            .iter()
            .map(|&c| match cands[c].parent {
                0 => None,
                p => cands[p].spec,
            })
            .collect();
        let logits = drafter.speculate(&tokens, &parents)?;
        let mut next = Vec::new();
        for (i, &c) in frontier.iter().enumerate() {
            cands[c].spec = Some(n_spec);
            n_spec += 1;
            dists[c] = draft_dist(&logits[i], params)?;
            next.extend(add_children(&mut cands, &mut dists, c, rng));
        }
        layer = next;
    }

    let limit = tree.budget;
    let mut keep = vec![false; cands.len()];
    keep[0] = true;
    let mut kept = 0usize;
    match tree.mode {
        ChildMode::Sampled => {
            for k in keep.iter_mut().skip(1).take(limit) {
                *k = true;
            }
        }
        ChildMode::TopM => {
            for c in by_score(&cands, 1..cands.len()) {
                if kept == limit {
                    break;
                }
                if keep[c] {
                    continue;
                }
                let mut missing = vec![c];
                let mut a = cands[c].parent;
                while !keep[a] {
                    missing.push(a);
                    a = cands[a].parent;
                }
                if kept + missing.len() <= limit {
                    kept += missing.len();
                    for m in missing {
                        keep[m] = true;
                    }
                }
            }
            if kept == 0 && cands.len() > 1 {
                bail!(Structural, "no draft node fits within budget {limit}");
            }
        }
    }

    let mut out = DraftTree::new(root_token);
    let mut new_index = vec![usize::MAX; cands.len()];
    new_index[0] = 0;
    out.set_dist(0, std::mem::take(&mut dists[0]));
    for c in 1..cands.len() {
        if !keep[c] {
            continue;
        }
        let parent = new_index[cands[c].parent];
        if parent == usize::MAX {
            bail!(Structural, "kept node {c} lost its parent");
        }
        let id = out.push(parent, cands[c].token, cands[c].prob)?;
        new_index[c] = id;
        if !dists[c].is_empty() {
            out.set_dist(id, std::mem::take(&mut dists[c]));
        }
    }
    if out.len() > limit + 1 || out.max_depth() > tree.depth {
        bail!(Structural, "draft tree of {} nodes and depth {} exceeds its limits", out.draft_len(), out.max_depth());
    }
    Ok(out)
}
