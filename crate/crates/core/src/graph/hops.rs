use rand::seq::index;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::bipartite::{BipartiteGraph, Node, NodeKind};
use crate::error::{GcrError, Result};
use crate::rng::{Rng, Stream};

/// Nodes at one exact distance from a root. All share a kind by bipartite parity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopSet {
    pub kind: NodeKind,
    /// Sorted ascending.
    pub nodes: Vec<usize>,
}

impl HopSet {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `hops[l]` holds the nodes at shortest-path distance exactly `l` from the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopSets {
    pub root: Node,
    pub hops: Vec<HopSet>,
}

impl HopSets {
    pub fn depth(&self) -> usize {
        self.hops.len() - 1
    }
}

/// Optional per-hop size cap. Oversized hop sets are replaced by a uniform
/// subsample drawn from a generator keyed on (seed, root), so the result does not
/// depend on the order in which roots are processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopCap {
    pub max_nodes: usize,
    pub seed: u64,
}

impl HopCap {
    fn rng_for(&self, root: Node) -> Rng {
        let kind_bit = match root.kind {
            NodeKind::User => 0u64,
            NodeKind::Item => 1u64,
        };
        let key = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(((root.index as u64) << 1) | kind_bit);
        let mut rng = Rng::seed_from_u64(key);
        rng.set_stream(Stream::HopCap as u64);
        rng
    }
}

/// Reusable breadth-first extractor; keeps visit marks between roots.
pub struct HopExtractor<'g> {
    graph: &'g BipartiteGraph,
    user_mark: Vec<u32>,
    item_mark: Vec<u32>,
    generation: u32,
}

impl<'g> HopExtractor<'g> {
    pub fn new(graph: &'g BipartiteGraph) -> Self {
        Self {
            graph,
            user_mark: vec![0; graph.num_users()],
            item_mark: vec![0; graph.num_items()],
            generation: 0,
        }
    }

    fn next_generation(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.user_mark.iter_mut().for_each(|m| *m = 0);
            self.item_mark.iter_mut().for_each(|m| *m = 0);
            self.generation = 1;
        }
    }

    /// Exact-distance hop sets of `root` up to `depth`.
    pub fn extract(&mut self, root: Node, depth: usize, cap: Option<HopCap>) -> Result<HopSets> {
        self.graph.check_node(root)?;
        self.next_generation();
        let generation = self.generation;
        let mark = |marks: &mut Vec<u32>, i: usize| -> bool {
            if marks[i] == generation {
                false
            } else {
                marks[i] = generation;
                true
            }
        };
        match root.kind {
            NodeKind::User => mark(&mut self.user_mark, root.index),
            NodeKind::Item => mark(&mut self.item_mark, root.index),
        };

        let mut hops = Vec::with_capacity(depth + 1);
        let mut frontier = vec![root.index];
        let mut kind = root.kind;
        hops.push(HopSet {
            kind,
            nodes: frontier.clone(),
        });
        for _ in 0..depth {
            let next_kind = kind.other();
            let mut next = Vec::new();
            for &j in &frontier {
                let neigh = self.graph.neighbors(Node { kind, index: j });
                let marks = match next_kind {
                    NodeKind::User => &mut self.user_mark,
                    NodeKind::Item => &mut self.item_mark,
                };
                for &k in neigh {
                    if mark(marks, k) {
                        next.push(k);
                    }
                }
            }
            next.sort_unstable();
            hops.push(HopSet {
                kind: next_kind,
                nodes: next.clone(),
            });
            frontier = next;
            kind = next_kind;
        }

        if let Some(cap) = cap {
            let mut rng = cap.rng_for(root);
            for hop in hops.iter_mut().skip(1) {
                if hop.nodes.len() > cap.max_nodes {
                    let mut picked: Vec<usize> =
                        index::sample(&mut rng, hop.nodes.len(), cap.max_nodes)
                            .into_iter()
                            .map(|p| hop.nodes[p])
                            .collect();
                    picked.sort_unstable();
                    hop.nodes = picked;
                }
            }
        }
        Ok(HopSets { root, hops })
    }
}

/// Exact-distance hop sets of `root` up to `depth` hops.
pub fn hop_neighbors(graph: &BipartiteGraph, root: Node, depth: usize) -> Result<HopSets> {
    HopExtractor::new(graph).extract(root, depth, None)
}

/// Hop sets for every user and item, precomputed once for a static graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopIndex {
    depth: usize,
    users: Vec<HopSets>,
    items: Vec<HopSets>,
}

impl HopIndex {
    pub fn build(graph: &BipartiteGraph, depth: usize, cap: Option<HopCap>) -> Result<Self> {
        if let Some(c) = cap {
            if c.max_nodes == 0 {
                return Err(GcrError::Config("hop cap must be positive".into()));
            }
        }
        let mut ex = HopExtractor::new(graph);
        let users = (0..graph.num_users())
            .map(|u| ex.extract(Node::user(u), depth, cap))
            .collect::<Result<Vec<_>>>()?;
        let items = (0..graph.num_items())
            .map(|i| ex.extract(Node::item(i), depth, cap))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            depth,
            users,
            items,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn get(&self, node: Node) -> &HopSets {
        match node.kind {
            NodeKind::User => &self.users[node.index],
            NodeKind::Item => &self.items[node.index],
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};
    use std::collections::{BTreeSet, VecDeque};

    #[test]
    fn hop_zero_is_root() {
        let g = BipartiteGraph::from_edges(2, 2, &[(0, 0), (1, 1)]).unwrap();
        let h = hop_neighbors(&g, Node::item(1), 0).unwrap();
        assert_eq!(h.hops.len(), 1);
        assert_eq!(h.hops[0].nodes, vec![1]);
        assert_eq!(h.hops[0].kind, NodeKind::Item);
    }

    #[test]
    fn path_graph() {
        // u0 - i0 - u1
        let g = BipartiteGraph::from_edges(2, 1, &[(0, 0), (1, 0)]).unwrap();
        let h = hop_neighbors(&g, Node::user(0), 2).unwrap();
        assert_eq!(h.hops[0], HopSet { kind: NodeKind::User, nodes: vec![0] });
        assert_eq!(h.hops[1], HopSet { kind: NodeKind::Item, nodes: vec![0] });
        assert_eq!(h.hops[2], HopSet { kind: NodeKind::User, nodes: vec![1] });
    }

    #[test]
    fn root_does_not_reappear_at_hop_two() {
        let g = BipartiteGraph::from_edges(1, 3, &[(0, 0), (0, 1), (0, 2)]).unwrap();
        let h = hop_neighbors(&g, Node::user(0), 3).unwrap();
        assert!(h.hops[2].is_empty());
        assert!(h.hops[3].is_empty());
    }

    #[test]
    fn invalid_root() {
        let g = BipartiteGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        assert!(matches!(hop_neighbors(&g, Node::user(3), 1), Err(GcrError::Index(_))));
    }

    // Independent oracle: flat-indexed BFS from scratch with a distance table.
    fn distances(g: &BipartiteGraph, root: usize) -> Vec<Option<usize>> {
        let nu = g.num_users();
        let n = g.num_nodes();
        let neigh = |v: usize| -> Vec<usize> {
            if v < nu {
                g.user_items(v).iter().map(|i| nu + i).collect()
            } else {
                g.item_users(v - nu).to_vec()
            }
        };
        let mut dist = vec![None; n];
        dist[root] = Some(0);
        let mut q = VecDeque::from([root]);
        while let Some(v) = q.pop_front() {
            for w in neigh(v) {
                if dist[w].is_none() {
                    dist[w] = Some(dist[v].unwrap() + 1);
                    q.push_back(w);
                }
            }
        }
        dist
    }

    #[test]
    fn random_graphs_match_shortest_paths() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let (nu, ni) = (rng.random_range(1..30), rng.random_range(1..30));
            let mut edges = Vec::new();
            for u in 0..nu {
                for i in 0..ni {
                    if rng.random_bool(0.08) {
                        edges.push((u, i));
                    }
                }
            }
            let g = BipartiteGraph::from_edges(nu, ni, &edges).unwrap();
            let depth = 3;
            for root in 0..nu + ni {
                let node = if root < nu { Node::user(root) } else { Node::item(root - nu) };
                let h = hop_neighbors(&g, node, depth).unwrap();
                let dist = distances(&g, root);
                for l in 0..=depth {
                    let want: BTreeSet<usize> =
                        (0..nu + ni).filter(|&v| dist[v] == Some(l)).collect();
                    let offset = if h.hops[l].kind == NodeKind::User { 0 } else { nu };
                    let got: BTreeSet<usize> = h.hops[l].nodes.iter().map(|k| k + offset).collect();
                    assert_eq!(got, want, "root {root} hop {l}");
                    let expect_kind = if l % 2 == 0 { node.kind } else { node.kind.other() };
                    assert_eq!(h.hops[l].kind, expect_kind);
                }
            }
        }
    }

    #[test]
    fn cap_subsamples_deterministically() {
        let edges: Vec<_> = (0..20).map(|u| (u, 0)).collect();
        let g = BipartiteGraph::from_edges(20, 1, &edges).unwrap();
        let cap = HopCap { max_nodes: 5, seed: 3 };
        let mut ex = HopExtractor::new(&g);
        let a = ex.extract(Node::item(0), 1, Some(cap)).unwrap();
        let b = ex.extract(Node::item(0), 1, Some(cap)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hops[1].len(), 5);
        assert!(a.hops[1].nodes.windows(2).all(|w| w[0] < w[1]));
        let ia = HopIndex::build(&g, 2, Some(cap)).unwrap();
        assert_eq!(ia.get(Node::item(0)), &a_with_depth(&g, cap));
    }

    fn a_with_depth(g: &BipartiteGraph, cap: HopCap) -> HopSets {
        HopExtractor::new(g).extract(Node::item(0), 2, Some(cap)).unwrap()
    }
}
