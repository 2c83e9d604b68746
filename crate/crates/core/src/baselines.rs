//! Reference relevance functions: plain dot product, an MLP over concatenated
//! embeddings, super-vector scoring of layer embeddings, and the normalised
//! linear propagation that produces those layers.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GcrError, Result};
use crate::graph::BipartiteGraph;
use crate::pgr::{EmbeddingTable, PgrTable};
use crate::tensor::{dot, DenseMatrix, MlpHead, Mode};

pub fn score_dot(e_u: &[f64], e_i: &[f64]) -> Result<f64> {
    if e_u.len() != e_i.len() {
        return Err(shape_err(format!("dot of lengths {} and {}", e_u.len(), e_i.len())));
    }
    Ok(dot(e_u, e_i))
}

/// Eval-mode head output on `[e_u || e_i]`.
pub fn score_mlp(e_u: &[f64], e_i: &[f64], head: &MlpHead) -> Result<f64> {
    if e_u.len() != e_i.len() || head.input_dim() != 2 * e_u.len() {
        return Err(shape_err(format!(
            "head expects {} inputs, got {} + {}",
            head.input_dim(),
            e_u.len(),
            e_i.len()
        )));
    }
    let x = [e_u, e_i].concat();
    Ok(head.forward(&x, Mode::Eval, None)?.0)
}

/// One propagation step over one side: `out[j] = sum_k src[k] / sqrt(deg j * deg k)`.
fn propagate_side(lists: &[&[usize]], deg_src: &[f64], src: &[f64], dim: usize, out: &mut [f64]) {
    out.par_chunks_mut(dim).enumerate().for_each(|(j, row)| {
        row.iter_mut().for_each(|v| *v = 0.0);
        let neigh = lists[j];
        if neigh.is_empty() {
            return;
        }
        let dj = neigh.len() as f64;
        for &k in neigh {
            let c = 1.0 / (dj * deg_src[k]).sqrt();
            for (o, s) in row.iter_mut().zip(&src[k * dim..(k + 1) * dim]) {
                *o += c * s;
            }
        }
    });
}

/// Symmetric normalised adjacency of the training graph.
pub struct Propagator<'g> {
    user_lists: Vec<&'g [usize]>,
    item_lists: Vec<&'g [usize]>,
    user_deg: Vec<f64>,
    item_deg: Vec<f64>,
}

impl<'g> Propagator<'g> {
    pub fn new(graph: &'g BipartiteGraph) -> Self {
        let user_lists: Vec<_> = (0..graph.num_users()).map(|u| graph.user_items(u)).collect();
        let item_lists: Vec<_> = (0..graph.num_items()).map(|i| graph.item_users(i)).collect();
        let user_deg = user_lists.iter().map(|l| l.len() as f64).collect();
        let item_deg = item_lists.iter().map(|l| l.len() as f64).collect();
        Self {
            user_lists,
            item_lists,
            user_deg,
            item_deg,
        }
    }

    /// Applies the normalised adjacency once to a (users, items) pair of tables.
    pub fn step(&self, users: &DenseMatrix, items: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
        let d = users.cols();
        let mut nu = DenseMatrix::zeros(users.rows(), d);
        let mut ni = DenseMatrix::zeros(items.rows(), d);
        propagate_side(&self.user_lists, &self.item_deg, items.data(), d, nu.data_mut());
        propagate_side(&self.item_lists, &self.user_deg, users.data(), d, ni.data_mut());
        (nu, ni)
    }

    /// Layer tables `0..=depth`, hop-major per row.
    pub fn layers(&self, emb: &EmbeddingTable, depth: usize) -> Result<PgrTable> {
        let d = emb.dim();
        let (nu, ni) = (emb.num_users(), emb.num_items());
        let mut users = DenseMatrix::zeros(nu, (depth + 1) * d);
        let mut items = DenseMatrix::zeros(ni, (depth + 1) * d);
        let (mut cu, mut ci) = (emb.users.clone(), emb.items.clone());
        for l in 0..=depth {
            if l > 0 {
                (cu, ci) = self.step(&cu, &ci);
            }
            write_block(&mut users, &cu, l, d);
            write_block(&mut items, &ci, l, d);
        }
        PgrTable::from_parts(depth, d, users, items)
    }

    /// Gradient wrt the layer-0 tables given gradients wrt every layer. The
    /// normalised adjacency is symmetric, so the adjoint of a step is a step.
    pub fn backprop(&self, d_users: &DenseMatrix, d_items: &DenseMatrix, depth: usize, dim: usize) -> (DenseMatrix, DenseMatrix) {
        let mut gu = read_block(d_users, depth, dim);
        let mut gi = read_block(d_items, depth, dim);
        for l in (0..depth).rev() {
            let (pu, pi) = self.step(&gu, &gi);
            gu = pu;
            gi = pi;
            gu.add_scaled(&read_block(d_users, l, dim), 1.0).expect("same shape");
            gi.add_scaled(&read_block(d_items, l, dim), 1.0).expect("same shape");
        }
        (gu, gi)
    }
}

fn write_block(dst: &mut DenseMatrix, src: &DenseMatrix, l: usize, d: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[l * d..(l + 1) * d].copy_from_slice(src.row(r));
    }
}

fn read_block(src: &DenseMatrix, l: usize, d: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(src.rows(), d);
    for r in 0..src.rows() {
        out.row_mut(r).copy_from_slice(&src.row(r)[l * d..(l + 1) * d]);
    }
    out
}

/// Linear normalised propagation `e^(l+1)_j = sum_{k in N_j} e^(l)_k / sqrt(deg j deg k)`.
/// Isolated nodes get zero beyond layer 0.
pub fn gnn_propagate(graph: &BipartiteGraph, emb: &EmbeddingTable, depth: usize) -> Result<PgrTable> {
    emb.matches_graph(graph)?;
    Propagator::new(graph).layers(emb, depth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "aggregation", rename_all = "kebab-case")]
pub enum Aggregation {
    Concat,
    WeightedSum { w_u: Vec<f64>, w_i: Vec<f64> },
}

/// Layer embeddings aggregated into one vector per side, then a dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperVectorModel {
    pub aggregation: Aggregation,
    pub depth: usize,
    #[serde(default)]
    pub trainable: bool,
}

impl SuperVectorModel {
    pub fn concat(depth: usize) -> Self {
        Self {
            aggregation: Aggregation::Concat,
            depth,
            trainable: false,
        }
    }

    /// Weighted sum with every layer weight `1/(L+1)`.
    pub fn uniform(depth: usize) -> Self {
        let w = vec![1.0 / (depth + 1) as f64; depth + 1];
        Self {
            aggregation: Aggregation::WeightedSum { w_u: w.clone(), w_i: w },
            depth,
            trainable: false,
        }
    }

    pub fn weighted(w_u: Vec<f64>, w_i: Vec<f64>) -> Result<Self> {
        if w_u.len() != w_i.len() || w_u.is_empty() {
            return Err(shape_err("layer weights need length L+1 on both sides"));
        }
        Ok(Self {
            depth: w_u.len() - 1,
            aggregation: Aggregation::WeightedSum { w_u, w_i },
            trainable: false,
        })
    }

    /// Score from flattened hop-major layer vectors.
    pub fn score_flat(&self, hu: &[f64], hi: &[f64], dim: usize) -> f64 {
        match &self.aggregation {
            Aggregation::Concat => dot(hu, hi),
            Aggregation::WeightedSum { w_u, w_i } => {
                let su = weighted_sum(hu, w_u, dim);
                let si = weighted_sum(hi, w_i, dim);
                dot(&su, &si)
            }
        }
    }
}

pub(crate) fn weighted_sum(flat: &[f64], w: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (l, wl) in w.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(&flat[l * dim..(l + 1) * dim]) {
            *o += wl * x;
        }
    }
    out
}

pub fn score_super_vector(model: &SuperVectorModel, layers_u: &[Vec<f64>], layers_i: &[Vec<f64>]) -> Result<f64> {
    let hops = model.depth + 1;
    if layers_u.len() != hops || layers_i.len() != hops {
        return Err(shape_err(format!(
            "expected {hops} layers per side, got {} and {}",
            layers_u.len(),
            layers_i.len()
        )));
    }
    let dim = layers_u[0].len();
    if layers_u.iter().chain(layers_i).any(|v| v.len() != dim) {
        return Err(shape_err("layer vectors have different dimensions"));
    }
    Ok(model.score_flat(&layers_u.concat(), &layers_i.concat(), dim))
}

/// Named aggregation for the super-vector baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuperVectorKind {
    Concat,
    WeightedSum,
}

impl FromStr for SuperVectorKind {
    type Err = GcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "weighted-sum" => Ok(Self::WeightedSum),
            other => Err(GcrError::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}
