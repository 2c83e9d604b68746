use serde::{Deserialize, Serialize};

use super::interactions::InteractionSet;
use crate::error::{GcrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    User,
    Item,
}

impl NodeKind {
    pub fn other(self) -> Self {
        match self {
            NodeKind::User => NodeKind::Item,
            NodeKind::Item => NodeKind::User,
        }
    }
}

/// A node of the bipartite graph: a kind plus a dense index within that kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    pub index: usize,
}

impl Node {
    pub fn user(index: usize) -> Self {
        Self {
            kind: NodeKind::User,
            index,
        }
    }

    pub fn item(index: usize) -> Self {
        Self {
            kind: NodeKind::Item,
            index,
        }
    }
}

/// Compressed sparse rows for one direction of the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Csr {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Csr {
    fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut targets = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            targets.extend_from_slice(&l);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    fn row(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    fn rows(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Immutable user-item bipartite graph with sorted, duplicate-free adjacency in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    user_adj: Csr,
    item_adj: Csr,
}

impl BipartiteGraph {
    /// Builds the graph from the positively labeled records.
    pub fn build(interactions: &InteractionSet) -> Self {
        let mut by_user = vec![Vec::new(); interactions.num_users()];
        let mut by_item = vec![Vec::new(); interactions.num_items()];
        for r in interactions.positives() {
            by_user[r.user].push(r.item);
            by_item[r.item].push(r.user);
        }
        Self {
            user_adj: Csr::from_lists(by_user),
            item_adj: Csr::from_lists(by_item),
        }
    }

    /// Builds from explicit edge lists; mostly useful in tests.
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut by_user = vec![Vec::new(); num_users];
        let mut by_item = vec![Vec::new(); num_items];
        for &(u, i) in edges {
            if u >= num_users || i >= num_items {
                return Err(GcrError::Index(format!("edge ({u}, {i}) out of range")));
            }
            by_user[u].push(i);
            by_item[i].push(u);
        }
        Ok(Self {
            user_adj: Csr::from_lists(by_user),
            item_adj: Csr::from_lists(by_item),
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_adj.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_adj.rows()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users() + self.num_items()
    }

    pub fn num_edges(&self) -> usize {
        self.user_adj.targets.len()
    }

    pub fn num_of(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::User => self.num_users(),
            NodeKind::Item => self.num_items(),
        }
    }

    pub fn user_items(&self, user: usize) -> &[usize] {
        self.user_adj.row(user)
    }

    pub fn item_users(&self, item: usize) -> &[usize] {
        self.item_adj.row(item)
    }

    /// Neighbors of `node`; they are all of the opposite kind.
    pub fn neighbors(&self, node: Node) -> &[usize] {
        match node.kind {
            NodeKind::User => self.user_items(node.index),
            NodeKind::Item => self.item_users(node.index),
        }
    }

    pub fn degree(&self, node: Node) -> usize {
        self.neighbors(node).len()
    }

    pub fn contains(&self, node: Node) -> bool {
        node.index < self.num_of(node.kind)
    }

    pub fn check_node(&self, node: Node) -> Result<()> {
        if self.contains(node) {
            Ok(())
        } else {
            Err(GcrError::Index(format!(
                "{:?} {} out of range ({} nodes of that kind)",
                node.kind,
                node.index,
                self.num_of(node.kind)
            )))
        }
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        user < self.num_users() && self.user_items(user).binary_search(&item).is_ok()
    }

    /// Per-user adjacency as owned lists.
    pub fn user_lists(&self) -> Vec<Vec<usize>> {
        (0..self.num_users()).map(|u| self.user_items(u).to_vec()).collect()
    }

    pub fn item_lists(&self) -> Vec<Vec<usize>> {
        (0..self.num_items()).map(|i| self.item_users(i).to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::interactions::Interaction;

    fn set(edges: &[(usize, usize)], nu: usize, ni: usize) -> InteractionSet {
        InteractionSet::new(
            edges.iter().map(|&(u, i)| Interaction::positive(u, i)).collect(),
            nu,
            ni,
        )
        .unwrap()
    }

    #[test]
    fn three_records() {
        let g = BipartiteGraph::build(&set(&[(0, 0), (0, 1), (1, 0)], 2, 2));
        assert_eq!(g.user_lists(), vec![vec![0, 1], vec![0]]);
        assert_eq!(g.item_lists(), vec![vec![0, 1], vec![0]]);
        assert_eq!(g.num_edges(), 3);
    }

    #[test]
    fn single_record() {
        let g = BipartiteGraph::build(&set(&[(0, 0)], 1, 1));
        assert_eq!(g.user_lists(), vec![vec![0]]);
        assert_eq!(g.item_lists(), vec![vec![0]]);
    }

    #[test]
    fn negative_labels_are_not_edges() {
        let s = InteractionSet::new(
            vec![
                Interaction::positive(0, 0),
                Interaction {
                    user: 0,
                    item: 1,
                    label: 0,
                },
            ],
            1,
            2,
        )
        .unwrap();
        let g = BipartiteGraph::build(&s);
        assert_eq!(g.user_items(0), &[0]);
        assert!(g.item_users(1).is_empty());
    }

    #[test]
    fn random_graph_is_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut edges = Vec::new();
        for u in 0..50 {
            for i in 0..50 {
                if rng.random_bool(0.1) {
                    edges.push((u, i));
                }
            }
        }
        let g = BipartiteGraph::build(&set(&edges, 50, 50));
        // exhaustive pair check
        for u in 0..50 {
            for i in 0..50 {
                let fwd = g.user_items(u).contains(&i);
                let back = g.item_users(i).contains(&u);
                assert_eq!(fwd, back);
                assert_eq!(fwd, edges.contains(&(u, i)));
            }
        }
        for u in 0..50 {
            assert!(g.user_items(u).windows(2).all(|w| w[0] < w[1]));
        }
        let mut deg = [0usize; 50];
        for &(u, _) in &edges {
            deg[u] += 1;
        }
        for (u, d) in deg.iter().enumerate() {
            assert_eq!(g.degree(Node::user(u)), *d);
        }
    }
}
