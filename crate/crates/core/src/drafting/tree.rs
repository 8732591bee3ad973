use std::fmt::Write as _;

use crate::error::{bail, Result};
use crate::numerics::BoolMatrix;

/// One drafted token. Node 0 of a tree is the root: the last committed
/// token, with no parent, depth 0 and score 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftNode {
    pub token: u32,
    pub parent: Option<usize>,
    pub depth: usize,
    /// Draft probability of `token` given its ancestor path.
    pub prob: f64,
    /// Product of the draft probabilities along the path.
    pub score: f64,
}

/// Draft tokens in parent-before-child order, with the draft distribution
/// each expanded node's children were chosen from.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftTree {
    nodes: Vec<DraftNode>,
    dists: Vec<Vec<f64>>,
}

impl DraftTree {
    pub fn new(root_token: u32) -> Self {
        Self {
            nodes: vec![DraftNode { token: root_token, parent: None, depth: 0, prob: 1.0, score: 1.0 }],
            dists: vec![Vec::new()],
        }
    }

    /// Appends a child of `parent`; returns its index.
    pub fn push(&mut self, parent: usize, token: u32, prob: f64) -> Result<usize> {
        let Some(p) = self.nodes.get(parent) else {
            bail!(Structural, "parent {parent} does not exist in a tree of {} nodes", self.nodes.len());
        };
        if !(prob > 0.0 && prob <= 1.0) {
            bail!(Invariant, "draft probability {prob} of token {token} is outside (0, 1]");
        }
        let node = DraftNode { token, parent: Some(parent), depth: p.depth + 1, prob, score: p.score * prob };
        self.nodes.push(node);
        self.dists.push(Vec::new());
        Ok(self.nodes.len() - 1)
    }

    /// Records the draft distribution at `node` (the one its children are
    /// drawn from).
    pub fn set_dist(&mut self, node: usize, dist: Vec<f64>) {
        self.dists[node] = dist;
    }

    pub fn nodes(&self) -> &[DraftNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &DraftNode {
        &self.nodes[i]
    }

    pub fn dists(&self) -> &[Vec<f64>] {
        &self.dists
    }

    /// Node count including the root.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Number of drafted tokens (the root excluded).
    pub fn draft_len(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    pub fn children(&self, u: usize) -> Vec<usize> {
        (u + 1..self.nodes.len()).filter(|&c| self.nodes[c].parent == Some(u)).collect()
    }

    /// Nodes from the root's child down to `u`.
    pub fn path(&self, u: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = u;
        while let Some(p) = self.nodes[cur].parent {
            out.push(cur);
            cur = p;
        }
        out.reverse();
        out
    }

    /// True when every node has at most one child.
    pub fn is_chain(&self) -> bool {
        self.nodes.iter().enumerate().skip(1).all(|(i, n)| n.parent == Some(i - 1))
    }

    /// One line per node: `id parent token prob score`, parent `-1` for
    /// the root.
    pub fn to_debug_string(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or(-1, |p| p as i64);
            let _ = writeln!(s, "{i} {parent} {} {:.9} {:.9}", n.token, n.prob, n.score);
        }
        s
    }

    /// Parses the debug format back (distributions are not stored).
    pub fn from_debug_string(text: &str) -> Result<Self> {
        let mut tree: Option<DraftTree> = None;
        for (line_no, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let parsed = (|| -> Option<(usize, i64, u32, f64)> {
                if f.len() != 5 {
                    return None;
                }
                Some((f[0].parse().ok()?, f[1].parse().ok()?, f[2].parse().ok()?, f[3].parse().ok()?))
            })();
            let Some((id, parent, token, prob)) = parsed else {
                bail!(Format, "tree dump line {}: {line:?}", line_no + 1);
            };
            if id != line_no {
                bail!(Format, "tree dump line {} has id {id}", line_no + 1);
            }
            match (&mut tree, parent) {
                (None, -1) => tree = Some(DraftTree::new(token)),
                (Some(t), p) if p >= 0 => {
                    t.push(p as usize, token, prob)?;
                }
                _ => bail!(Structural, "tree dump line {}: misplaced root", line_no + 1),
            }
        }
        tree.ok_or_else(|| crate::HassError::Format("empty tree dump".into()))
    }
}

/// `mask[i][j]` is true iff node `j` is an ancestor of node `i` or `i`
/// itself.
pub fn tree_mask(tree: &DraftTree) -> BoolMatrix {
    let n = tree.len();
    let mut m = BoolMatrix::new(n, n);
    for i in 0..n {
        let mut cur = Some(i);
        while let Some(c) = cur {
            m.set(i, c, true);
            cur = tree.nodes[c].parent;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> DraftTree {
        let mut t = DraftTree::new(0);
        for i in 0..n {
            t.push(i, i as u32 + 1, 0.5).unwrap();
        }
        t
    }

    #[test]
    fn chain_mask_is_lower_triangular() {
        let t = chain(4);
        assert!(t.is_chain());
        assert_eq!(tree_mask(&t), BoolMatrix::causal(5));
    }

    #[test]
    fn star_children_see_root_and_self() {
        let mut t = DraftTree::new(9);
        for tok in 1..=3 {
            t.push(0, tok, 0.2).unwrap();
        }
        let m = tree_mask(&t);
        for c in 1..=3 {
            assert_eq!(m.row_count(c), 2);
            assert!(m.get(c, 0) && m.get(c, c));
        }
        assert_eq!(t.children(0), vec![1, 2, 3]);
        assert!(!t.is_chain());
    }

    #[test]
    fn scores_multiply_along_paths() {
        let mut t = DraftTree::new(0);
        let a = t.push(0, 1, 0.5).unwrap();
        let b = t.push(a, 2, 0.25).unwrap();
        assert_eq!(t.node(b).score, 0.125);
        assert_eq!(t.node(b).depth, 2);
        assert_eq!(t.path(b), vec![a, b]);
        assert!(t.push(0, 3, 0.0).is_err());
        assert!(matches!(t.push(7, 3, 0.5), Err(crate::HassError::Structural(_))));
    }

    #[test]
    fn debug_dump_round_trips() {
        let mut t = DraftTree::new(4);
        let a = t.push(0, 1, 0.5).unwrap();
        t.push(0, 2, 0.25).unwrap();
        t.push(a, 3, 0.125).unwrap();
        let text = t.to_debug_string();
        assert_eq!(text.lines().next().unwrap(), "0 -1 4 1.000000000 1.000000000");
        let back = DraftTree::from_debug_string(&text).unwrap();
        assert_eq!(back.nodes(), t.nodes());
        assert!(DraftTree::from_debug_string("0 -1 4 1.0").is_err());
    }
}
