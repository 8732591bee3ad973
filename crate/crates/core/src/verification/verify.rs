use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use super::SamplingParams;
use crate::drafting::DraftTree;
use crate::error::{bail, Result};
use crate::numerics::Rng;

/// Probability arithmetic used by verification: `f64` in decoding,
/// exact rationals in the enumeration tests.
pub trait Prob: num_traits::Num + Clone + PartialOrd + Debug {}
impl<T: num_traits::Num + Clone + PartialOrd + Debug> Prob for T {}

/// Source of the random decisions made during verification.
pub trait Coin<P> {
    /// `true` with probability `prob` (which lies in `[0, 1]`).
    fn bernoulli(&mut self, prob: &P) -> bool;
    /// Index drawn with probability proportional to `weights`.
    fn categorical(&mut self, weights: &[P]) -> usize;
}

/// Each Bernoulli trial consumes one uniform and each categorical draw
/// one uniform, so a cycle's draws are: one per tested draft token in
/// test order, then one for the bonus token.
impl Coin<f64> for Rng {
    fn bernoulli(&mut self, prob: &f64) -> bool {
        self.uniform() < *prob
    }

    fn categorical(&mut self, weights: &[f64]) -> usize {
        Rng::categorical(self, weights)
    }
}

/// Outcome of verifying one draft.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyResult {
    pub accepted: Vec<u32>,
    /// Node index of each accepted token (chain position `i` is node `i`,
    /// node 0 being the last committed token).
    pub accepted_nodes: Vec<usize>,
    /// Token sampled from the final target or residual distribution.
    pub bonus: u32,
    pub accepted_count: usize,
    /// `depth_reached[d]` is 1 when a draft token at depth `d + 1` was
    /// tested; `depth_accepted[d]` is 1 when one was accepted.
    pub depth_reached: Vec<u32>,
    pub depth_accepted: Vec<u32>,
}

impl VerifyResult {
    pub fn tokens_generated(&self) -> usize {
        self.accepted_count + 1
    }

    /// Accepted tokens followed by the bonus token.
    pub fn emitted(&self) -> Vec<u32> {
        let mut out = self.accepted.clone();
        out.push(self.bonus);
        out
    }
}

fn argmax_p<P: Prob>(v: &[P]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn acceptance<P: Prob>(r: &P, p: &P) -> Result<P> {
    if *p <= P::zero() {
        bail!(Invariant, "drafted token has zero draft probability");
    }
    let ratio = r.clone() / p.clone();
    Ok(if ratio > P::one() { P::one() } else { ratio })
}

/// `norm(max(r - p, 0))`; falls back to `r` when the difference vanishes.
pub fn residual<P: Prob>(r: &[P], p: &[P]) -> Vec<P> {
    let diff: Vec<P> = r
        .iter()
        .zip(p)
        .map(|(a, b)| if a.clone() > b.clone() { a.clone() - b.clone() } else { P::zero() })
        .collect();
    let total = diff.iter().fold(P::zero(), |s, x| s + x.clone());
    if total <= P::zero() {
        return r.to_vec();
    }
    diff.into_iter().map(|x| x / total.clone()).collect()
}

fn check_rows<P>(rows: &[Vec<P>], width: usize, what: &str) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        bail!(Shape, "{what} row of width {} in a vocabulary of {width}", r.len());
    }
    Ok(())
}

/// Chain verification with explicit arithmetic and randomness.
///
/// `p[i]` is the draft distribution `tokens[i]` was drawn from and `q[i]`
/// the target distribution at the same position; `q` has one extra row
/// for the bonus token after a fully accepted chain.
pub fn verify_chain_with<P: Prob, C: Coin<P>>(
    tokens: &[u32],
    p: &[Vec<P>],
    q: &[Vec<P>],
    greedy: bool,
    coin: &mut C,
) -> Result<VerifyResult> {
    let l = tokens.len();
    if p.len() != l || q.len() != l + 1 {
        bail!(Shape, "chain of {l} tokens needs {l} draft and {} target rows, got {} and {}", l + 1, p.len(), q.len());
    }
    let v = q[0].len();
    check_rows(q, v, "target")?;
    if !greedy {
        check_rows(p, v, "draft")?;
    }
    let mut res = VerifyResult {
        accepted: Vec::new(),
        accepted_nodes: Vec::new(),
        bonus: 0,
        accepted_count: 0,
        depth_reached: vec![0; l],
        depth_accepted: vec![0; l],
    };
    for i in 0..l {
        let x = tokens[i] as usize;
        if x >= v {
            bail!(Shape, "drafted token {x} outside vocabulary of {v}");
        }
        res.depth_reached[i] = 1;
        let ok = if greedy {
            argmax_p(&q[i]) == x
        } else {
            let a = acceptance(&q[i][x], &p[i][x])?;
            coin.bernoulli(&a)
        };
        if !ok {
            res.bonus = if greedy { argmax_p(&q[i]) } else { coin.categorical(&residual(&q[i], &p[i])) } as u32;
            return Ok(res);
        }
        res.depth_accepted[i] = 1;
        res.accepted.push(tokens[i]);
        res.accepted_nodes.push(i + 1);
        res.accepted_count += 1;
    }
    res.bonus = if greedy { argmax_p(&q[l]) } else { coin.categorical(&q[l]) } as u32;
    Ok(res)
}

/// Chain verification against already filtered target distributions.
pub fn verify_chain(
    tokens: &[u32],
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    params: &SamplingParams,
    rng: &mut Rng,
) -> Result<VerifyResult> {
    verify_chain_with(tokens, p, q, params.is_greedy(), rng)
}

/// Multi-round tree verification with explicit arithmetic and randomness.
///
/// Node 0 is the last committed token. `parents[u]` is `None` only for
/// node 0, `draft[u]` is the draft distribution node `u`'s children were
/// drawn from (empty when `u` was not expanded) and `target[u]` is the
/// target distribution after node `u`. At each node, starting from
/// `r = target[u]`, the children are tested in index order: a child `c` is
/// accepted with probability `min(1, r(c) / draft[u](c))`, otherwise
/// `r <- norm(max(r - draft[u], 0))`. When no child is accepted the bonus
/// token is drawn from the final `r`.
pub fn verify_tree_with<P: Prob, C: Coin<P>>(
    tokens: &[u32],
    parents: &[Option<usize>],
    draft: &[Vec<P>],
    target: &[Vec<P>],
    greedy: bool,
    coin: &mut C,
) -> Result<VerifyResult> {
    let n = tokens.len();
    if n == 0 || parents.len() != n || draft.len() != n || target.len() != n {
        bail!(Shape, "tree of {n} nodes with {} parents, {} draft and {} target rows", parents.len(), draft.len(), target.len());
    }
    let v = target[0].len();
    check_rows(target, v, "target")?;
    let mut children = vec![Vec::new(); n];
    let mut depth = vec![0usize; n];
    for u in 1..n {
        match parents[u] {
            Some(par) if par < u => {
                children[par].push(u);
                depth[u] = depth[par] + 1;
            }
            _ => bail!(Structural, "node {u} does not follow its parent"),
        }
    }
    let max_depth = depth.iter().copied().max().unwrap_or(0);
    let mut res = VerifyResult {
        accepted: Vec::new(),
        accepted_nodes: Vec::new(),
        bonus: 0,
        accepted_count: 0,
        depth_reached: vec![0; max_depth],
        depth_accepted: vec![0; max_depth],
    };
    let mut u = 0;
    loop {
        let kids = &children[u];
        if !kids.is_empty() {
            res.depth_reached[depth[u]] = 1;
        }
        if greedy {
            let best = argmax_p(&target[u]);
            match kids.iter().find(|&&c| tokens[c] as usize == best) {
                Some(&c) => {
                    res.depth_accepted[depth[u]] = 1;
                    res.accepted.push(tokens[c]);
                    res.accepted_nodes.push(c);
                    res.accepted_count += 1;
                    u = c;
                    continue;
                }
                None => {
                    res.bonus = best as u32;
                    return Ok(res);
                }
            }
        }
        if !kids.is_empty() && draft[u].len() != v {
            bail!(Shape, "expanded node {u} has a draft row of width {}", draft[u].len());
        }
        let mut r = target[u].clone();
        let mut next = None;
        for &c in kids {
            let x = tokens[c] as usize;
            if x >= v {
                bail!(Shape, "drafted token {x} outside vocabulary of {v}");
            }
            let a = acceptance(&r[x], &draft[u][x])?;
            if coin.bernoulli(&a) {
                next = Some(c);
                break;
            }
            r = residual(&r, &draft[u]);
        }
        match next {
            Some(c) => {
                res.depth_accepted[depth[u]] = 1;
                res.accepted.push(tokens[c]);
                res.accepted_nodes.push(c);
                res.accepted_count += 1;
                u = c;
            }
            None => {
                res.bonus = coin.categorical(&r) as u32;
                return Ok(res);
            }
        }
    }
}

/// Tree verification against already filtered per-node target
/// distributions (`target[u]` for every node, root included).
pub fn verify_tree(tree: &DraftTree, target: &[Vec<f64>], params: &SamplingParams, rng: &mut Rng) -> Result<VerifyResult> {
    let tokens: Vec<u32> = tree.nodes().iter().map(|n| n.token).collect();
    let parents: Vec<Option<usize>> = tree.nodes().iter().map(|n| n.parent).collect();
    verify_tree_with(&tokens, &parents, tree.dists(), target, params.is_greedy(), rng)
}
