//! Interaction ingest, the bipartite graph, splits and exact-distance hop extraction.

mod bipartite;
mod hops;
mod interactions;
mod split;

pub use bipartite::{BipartiteGraph, Node, NodeKind};
pub use hops::{hop_neighbors, HopCap, HopExtractor, HopIndex, HopSet, HopSets};
pub use interactions::{
    format_interactions, load_interactions, parse_interactions, parse_with_ids, IdMap,
    Interaction, InteractionFormat, InteractionSet, LoadedInteractions,
};
pub use split::{split_interactions, SplitSpec, Splits};
