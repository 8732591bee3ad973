use std::sync::Arc;

use crate::error::{bail, Result};
use crate::model::{DraftHead, KvCache, TargetModel};
use crate::numerics::{AttnMask, Float, Tensor};

/// Proposal model driven by the decode loop.
///
/// The drafter keeps a committed context, one entry per verified position,
/// plus a set of speculative nodes that hang off the last committed entry
/// (the root). Speculative nodes form a tree: each attends to the whole
/// committed context, its speculative ancestors and itself.
pub trait Drafter<T: Float> {
    /// Appends committed entries and returns the logits after the last one.
    /// Row `i` of `features` is the target feature preceding `tokens[i]`.
    /// Drops any speculative nodes first.
    fn prime(&mut self, features: &Tensor<T>, tokens: &[u32]) -> Result<Vec<f64>>;

    /// Adds one layer of speculative nodes and returns each node's logits.
    /// `parents[i]` is `None` for a child of the root, otherwise the index
    /// of an earlier speculative node (in order of creation).
    fn speculate(&mut self, tokens: &[u32], parents: &[Option<usize>]) -> Result<Vec<Vec<f64>>>;

    /// Forgets every speculative node.
    fn rollback(&mut self);

    /// Committed entries so far.
    fn committed_len(&self) -> usize;

    /// Largest number of committed plus speculative entries.
    fn capacity(&self) -> usize;
}

struct SpecNode {
    parent: Option<usize>,
    depth: usize,
}

/// Speculative bookkeeping shared by both drafters.
struct SpecState {
    nodes: Vec<SpecNode>,
}

impl SpecState {
    fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Positions and the attention mask of a new layer; the cache holds
    /// `committed` entries followed by the existing speculative nodes.
    fn plan(&self, committed: usize, parents: &[Option<usize>]) -> Result<(Vec<usize>, Vec<usize>, Arc<AttnMask>)> {
        if committed == 0 {
            bail!(Invariant, "speculating before the drafter was primed");
        }
        let spec = self.nodes.len();
        let mut depths = Vec::with_capacity(parents.len());
        let mut rows = Vec::with_capacity(parents.len());
        for (i, p) in parents.iter().enumerate() {
            let mut row: Vec<u32> = (0..committed as u32).collect();
            let mut anc = Vec::new();
            let mut cur = *p;
            while let Some(a) = cur {
                if a >= spec {
                    bail!(Structural, "speculative parent {a} does not exist ({spec} nodes)");
                }
                anc.push((committed + a) as u32);
                cur = self.nodes[a].parent;
            }
            anc.reverse();
            row.extend(anc);
            row.push((committed + spec + i) as u32);
            depths.push(p.map_or(1, |a| self.nodes[a].depth + 1));
            rows.push(row);
        }
        let positions = depths.iter().map(|d| committed - 1 + d).collect();
        let mask = AttnMask::from_rows(committed + spec + parents.len(), rows)?;
        Ok((depths, positions, Arc::new(mask)))
    }

    fn push(&mut self, parents: &[Option<usize>], depths: &[usize]) {
        for (p, &d) in parents.iter().zip(depths) {
            self.nodes.push(SpecNode { parent: *p, depth: d });
        }
    }
}

fn rows_f64<T: Float>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|x| x.f64()).collect()).collect()
}

/// Where a drafter input feature came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Target feature, row `row` of a `prime` call.
    Target { row: usize },
    /// Draft feature produced at the root (the last committed entry).
    Root,
    /// Draft feature produced at speculative node `node`.
    Draft { node: usize },
}

/// One traced drafter input.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub position: usize,
    pub token: u32,
    pub source: FeatureSource,
    pub feature: Vec<f64>,
}

/// Drafter backed by the trained head. Speculative steps feed the head
/// its own output feature from the parent node.
pub struct HeadDrafter<'a, T> {
    head: &'a DraftHead<T>,
    cache: KvCache<T>,
    committed: usize,
    spec: SpecState,
    root_feature: Vec<T>,
    spec_features: Vec<Vec<T>>,
    trace: Option<Vec<TraceEntry>>,
}

impl<'a, T: Float> HeadDrafter<'a, T> {
    pub fn new(head: &'a DraftHead<T>) -> Self {
        Self {
            head,
            cache: head.new_cache(),
            committed: 0,
            spec: SpecState::new(),
            root_feature: Vec::new(),
            spec_features: Vec::new(),
            trace: None,
        }
    }

    /// Records every input feature from now on.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> &[TraceEntry] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Draft feature output at speculative node `i`.
    pub fn spec_feature(&self, i: usize) -> &[T] {
        &self.spec_features[i]
    }

    pub fn root_feature(&self) -> &[T] {
        &self.root_feature
    }

    fn record(&mut self, position: usize, token: u32, source: FeatureSource, feature: &[T]) {
        if let Some(t) = &mut self.trace {
            t.push(TraceEntry { position, token, source, feature: feature.iter().map(|x| x.f64()).collect() });
        }
    }
}

impl<T: Float> Drafter<T> for HeadDrafter<'_, T> {
    fn prime(&mut self, features: &Tensor<T>, tokens: &[u32]) -> Result<Vec<f64>> {
        self.rollback();
        let positions: Vec<usize> = (self.committed..self.committed + tokens.len()).collect();
        let out = self.head.draft_forward(features, tokens, &positions, &self.cache, None)?;
        self.cache.append(&out.new_kv, None)?;
        for (i, (&p, &tok)) in positions.iter().zip(tokens).enumerate() {
            let row = features.row(i).to_vec();
            self.record(p, tok, FeatureSource::Target { row: i }, &row);
        }
        self.committed += tokens.len();
        let last = tokens.len() - 1;
        self.root_feature = out.features.row(last).to_vec();
        Ok(out.logits.row(last).iter().map(|x| x.f64()).collect())
    }

    fn speculate(&mut self, tokens: &[u32], parents: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
        if tokens.len() != parents.len() || tokens.is_empty() {
            bail!(Shape, "{} speculative tokens with {} parents", tokens.len(), parents.len());
        }
        let (depths, positions, mask) = self.spec.plan(self.committed, parents)?;
        let d = self.head.config().d_model;
        let mut feats = Vec::with_capacity(tokens.len() * d);
        for (i, p) in parents.iter().enumerate() {
            let (src, f) = match p {
                None => (FeatureSource::Root, self.root_feature.clone()),
                Some(a) => (FeatureSource::Draft { node: *a }, self.spec_features[*a].clone()),
            };
            self.record(positions[i], tokens[i], src, &f);
            feats.extend(f);
        }
        let feats = Tensor::new(vec![tokens.len(), d], feats)?;
        let out = self.head.forward_masked(&feats, tokens, &positions, &self.cache, mask)?;
        self.cache.append(&out.new_kv, None)?;
        self.spec.push(parents, &depths);
        for r in 0..tokens.len() {
            self.spec_features.push(out.features.row(r).to_vec());
        }
        Ok(rows_f64(&out.logits))
    }

    fn rollback(&mut self) {
        self.cache.truncate(self.committed);
        self.spec.nodes.clear();
        self.spec_features.clear();
    }

    fn committed_len(&self) -> usize {
        self.committed
    }

    fn capacity(&self) -> usize {
        self.cache.capacity()
    }
}

/// Drafter that proposes from the target model itself, ignoring features.
/// Its draft distributions are bit-identical to the target distributions
/// computed during verification.
pub struct TargetDrafter<'a, T> {
    target: &'a TargetModel<T>,
    cache: KvCache<T>,
    committed: usize,
    spec: SpecState,
}

impl<'a, T: Float> TargetDrafter<'a, T> {
    pub fn new(target: &'a TargetModel<T>) -> Self {
        Self { target, cache: target.new_cache(), committed: 0, spec: SpecState::new() }
    }
}

impl<T: Float> Drafter<T> for TargetDrafter<'_, T> {
    fn prime(&mut self, _features: &Tensor<T>, tokens: &[u32]) -> Result<Vec<f64>> {
        self.rollback();
        let positions: Vec<usize> = (self.committed..self.committed + tokens.len()).collect();
        let out = self.target.forward_cached(tokens, &positions, &self.cache, None)?;
        self.cache.append(&out.new_kv, None)?;
        self.committed += tokens.len();
        Ok(out.logits.row(tokens.len() - 1).iter().map(|x| x.f64()).collect())
    }

    fn speculate(&mut self, tokens: &[u32], parents: &[Option<usize>]) -> Result<Vec<Vec<f64>>> {
        if tokens.len() != parents.len() || tokens.is_empty() {
            bail!(Shape, "{} speculative tokens with {} parents", tokens.len(), parents.len());
        }
        let (depths, positions, mask) = self.spec.plan(self.committed, parents)?;
        let out = self.target.forward_masked(tokens, &positions, &self.cache, mask)?;
        self.cache.append(&out.new_kv, None)?;
        self.spec.push(parents, &depths);
        Ok(rows_f64(&out.logits))
    }

    fn rollback(&mut self) {
        self.cache.truncate(self.committed);
        self.spec.nodes.clear();
    }

    fn committed_len(&self) -> usize {
        self.committed
    }

    fn capacity(&self) -> usize {
        self.cache.capacity()
    }
}
