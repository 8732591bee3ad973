//! Draft chains and trees built from a drafter during decoding.

mod build;
mod drafter;
mod tree;

pub use build::{draft_chain, draft_dist, draft_tree_dynamic, ChildMode, TreeParams};
pub use drafter::{Drafter, FeatureSource, HeadDrafter, TargetDrafter, TraceEntry};
pub use tree::{tree_mask, DraftNode, DraftTree};
