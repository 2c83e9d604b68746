//! Plain graph representation: parameter-free per-hop mean pooling of raw embeddings.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{GcrError, Result};
use crate::graph::{BipartiteGraph, HopExtractor, HopIndex, HopSets, Node, NodeKind};
use crate::rng::Rng;
use crate::tensor::{DenseMatrix, Reader};

pub const PGR_MAGIC: &[u8; 4] = b"PGR1";
pub const GNN_MAGIC: &[u8; 4] = b"GNN1";

/// Raw user and item embeddings (`num_users x d` and `num_items x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub users: DenseMatrix,
    pub items: DenseMatrix,
}

impl EmbeddingTable {
    pub fn new(users: DenseMatrix, items: DenseMatrix) -> Result<Self> {
        if users.cols() != items.cols() {
            return Err(GcrError::Shape(format!(
                "user dimension {} differs from item dimension {}",
                users.cols(),
                items.cols()
            )));
        }
        if users.cols() == 0 {
            return Err(GcrError::Config("embedding dimension must be at least 1".into()));
        }
        users.check_finite("user embeddings")?;
        items.check_finite("item embeddings")?;
        Ok(Self { users, items })
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn normal(num_users: usize, num_items: usize, dim: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let dist = Normal::new(0.0, std).map_err(|e| GcrError::Config(e.to_string()))?;
        let mut draw = |n: usize| -> Vec<f64> { (0..n * dim).map(|_| dist.sample(rng)).collect() };
        let users = DenseMatrix::from_vec(num_users, dim, draw(num_users))?;
        let items = DenseMatrix::from_vec(num_items, dim, draw(num_items))?;
        Self::new(users, items)
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    pub fn of(&self, kind: NodeKind) -> &DenseMatrix {
        match kind {
            NodeKind::User => &self.users,
            NodeKind::Item => &self.items,
        }
    }

    pub fn of_mut(&mut self, kind: NodeKind) -> &mut DenseMatrix {
        match kind {
            NodeKind::User => &mut self.users,
            NodeKind::Item => &mut self.items,
        }
    }

    pub fn get(&self, node: Node) -> &[f64] {
        self.of(node.kind).row(node.index)
    }

    pub fn matches_graph(&self, graph: &BipartiteGraph) -> Result<()> {
        if self.num_users() != graph.num_users() || self.num_items() != graph.num_items() {
            return Err(GcrError::Shape(format!(
                "embeddings cover {}x{} nodes, graph has {}x{}",
                self.num_users(),
                self.num_items(),
                graph.num_users(),
                graph.num_items()
            )));
        }
        Ok(())
    }
}

/// Mean of the raw embeddings of `members` (zero vector when empty) written into `out`.
pub(crate) fn mean_into(table: &DenseMatrix, members: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if members.is_empty() {
        return;
    }
    for &k in members {
        for (o, e) in out.iter_mut().zip(table.row(k)) {
            *o += e;
        }
    }
    let n = members.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
}

fn readout_all(hops: &HopSets, emb: &EmbeddingTable, out: &mut [f64]) {
    let d = emb.dim();
    for (l, hop) in hops.hops.iter().enumerate() {
        mean_into(emb.of(hop.kind), &hop.nodes, &mut out[l * d..(l + 1) * d]);
    }
}

/// Readout of one hop of one root.
pub fn readout_hop(graph: &BipartiteGraph, emb: &EmbeddingTable, root: Node, hop: usize) -> Result<Vec<f64>> {
    emb.matches_graph(graph)?;
    let hops = HopExtractor::new(graph).extract(root, hop, None)?;
    let set = &hops.hops[hop];
    let mut out = vec![0.0; emb.dim()];
    mean_into(emb.of(set.kind), &set.nodes, &mut out);
    Ok(out)
}

/// Per-node hop readouts. Row `j` of [`PgrTable::users`] holds `L+1` consecutive
/// `d`-vectors, hop 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct PgrTable {
    depth: usize,
    dim: usize,
    users: DenseMatrix,
    items: DenseMatrix,
}

impl PgrTable {
    pub fn from_parts(depth: usize, dim: usize, users: DenseMatrix, items: DenseMatrix) -> Result<Self> {
        let width = (depth + 1) * dim;
        if users.cols() != width || items.cols() != width {
            return Err(GcrError::Shape(format!(
                "hop tables must have {width} columns for L={depth}, d={dim}"
            )));
        }
        Ok(Self {
            depth,
            dim,
            users,
            items,
        })
    }

    /// Readouts for every node using a prebuilt hop index.
    pub fn from_index(index: &HopIndex, emb: &EmbeddingTable) -> Result<Self> {
        if index.num_users() != emb.num_users() || index.num_items() != emb.num_items() {
            return Err(GcrError::Shape("hop index and embeddings disagree on node counts".into()));
        }
        let (depth, dim) = (index.depth(), emb.dim());
        let width = (depth + 1) * dim;
        let build = |kind: NodeKind, n: usize| -> Result<DenseMatrix> {
            let data: Vec<f64> = (0..n)
                .into_par_iter()
                .flat_map_iter(|j| {
                    let mut row = vec![0.0; width];
                    readout_all(index.get(Node { kind, index: j }), emb, &mut row);
                    row
                })
                .collect();
            DenseMatrix::from_vec(n, width, data)
        };
        Self::from_parts(
            depth,
            dim,
            build(NodeKind::User, emb.num_users())?,
            build(NodeKind::Item, emb.num_items())?,
        )
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn users(&self) -> &DenseMatrix {
        &self.users
    }

    pub fn items(&self) -> &DenseMatrix {
        &self.items
    }

    pub fn of(&self, kind: NodeKind) -> &DenseMatrix {
        match kind {
            NodeKind::User => &self.users,
            NodeKind::Item => &self.items,
        }
    }

    /// All hop vectors of `node`, flattened.
    pub fn hops(&self, node: Node) -> &[f64] {
        self.of(node.kind).row(node.index)
    }

    pub fn hop(&self, node: Node, l: usize) -> &[f64] {
        &self.hops(node)[l * self.dim..(l + 1) * self.dim]
    }

    /// Errors unless the table has exactly the expected geometry.
    pub fn check_shape(&self, depth: usize, dim: usize, num_users: usize, num_items: usize) -> Result<()> {
        if self.depth != depth || self.dim != dim {
            return Err(GcrError::Shape(format!(
                "cache has L={}, d={}; expected L={depth}, d={dim}",
                self.depth, self.dim
            )));
        }
        if self.users.rows() != num_users || self.items.rows() != num_items {
            return Err(GcrError::Shape(format!(
                "cache covers {}x{} nodes; expected {num_users}x{num_items}",
                self.users.rows(),
                self.items.rows()
            )));
        }
        Ok(())
    }

    /// `magic`, then `u32` L, `u32` d, `u64` users, `u64` items, then the
    /// users' rows followed by the items' rows as little-endian `f64`.
    pub fn encode(&self, magic: &[u8; 4]) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * (self.users.len() + self.items.len()));
        out.extend_from_slice(magic);
        out.extend_from_slice(&(self.depth as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.users.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.items.rows() as u64).to_le_bytes());
        for v in self.users.data().iter().chain(self.items.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let got = r.take(4)?;
        if got != magic {
            return Err(GcrError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let depth = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let nu = r.u64()? as usize;
        let ni = r.u64()? as usize;
        let width = (depth + 1)
            .checked_mul(dim)
            .ok_or_else(|| GcrError::Format("header overflows".into()))?;
        let users = DenseMatrix::from_vec(nu, width, r.f64s(nu.saturating_mul(width))?)?;
        let items = DenseMatrix::from_vec(ni, width, r.f64s(ni.saturating_mul(width))?)?;
        r.finish()?;
        Self::from_parts(depth, dim, users, items)
    }
}

/// Readouts for every node and every hop up to `depth`.
pub fn precompute_pgr(graph: &BipartiteGraph, emb: &EmbeddingTable, depth: usize) -> Result<PgrTable> {
    emb.matches_graph(graph)?;
    let index = HopIndex::build(graph, depth, None)?;
    PgrTable::from_index(&index, emb)
}

pub fn save_pgr(table: &PgrTable, path: &Path) -> Result<()> {
    fs::write(path, table.encode(PGR_MAGIC))?;
    Ok(())
}

pub fn load_pgr(path: &Path) -> Result<PgrTable> {
    PgrTable::decode(&fs::read(path)?, PGR_MAGIC)
}
