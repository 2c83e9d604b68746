//! Cross-correlated aggregation: every (user hop, item hop) pair is correlated,
//! either by a dot product (HCC) or element-wise (ECC), and the concatenated
//! terms are scored by a feed-forward head.
//!
//! Term order is row-major over `(l_u, l_i)` with `l_u` outer. For ECC, block
//! `(l_u, l_i)` occupies `d` consecutive entries.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GcrError, Result};
use crate::rng::Rng;
use crate::tensor::{dot, DenseMatrix, HeadConfig, MlpHead, Mode, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossMode {
    Hcc,
    Ecc,
}

impl CrossMode {
    /// Width of the concatenated cross-term vector.
    pub fn width(self, depth: usize, dim: usize) -> usize {
        let pairs = (depth + 1) * (depth + 1);
        match self {
            CrossMode::Hcc => pairs,
            CrossMode::Ecc => pairs * dim,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CrossMode::Hcc => "hcc",
            CrossMode::Ecc => "ecc",
        }
    }
}

impl FromStr for CrossMode {
    type Err = GcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hcc" => Ok(Self::Hcc),
            "ecc" => Ok(Self::Ecc),
            other => Err(GcrError::Config(format!("unknown cross mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTerms {
    pub mode: CrossMode,
    pub depth: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl CrossTerms {
    pub fn index(&self, lu: usize, li: usize) -> usize {
        (self.depth + 1) * lu + li
    }

    /// The HCC scalar or ECC block for `(lu, li)`.
    pub fn block(&self, lu: usize, li: usize) -> &[f64] {
        let k = self.index(lu, li);
        match self.mode {
            CrossMode::Hcc => &self.values[k..k + 1],
            CrossMode::Ecc => &self.values[k * self.dim..(k + 1) * self.dim],
        }
    }
}

fn flatten(hops: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let dim = hops.first().map_or(0, Vec::len);
    if hops.is_empty() || dim == 0 {
        return Err(shape_err("need at least one non-empty hop vector"));
    }
    if hops.iter().any(|h| h.len() != dim) {
        return Err(shape_err("hop vectors have different dimensions"));
    }
    Ok((hops.concat(), dim))
}

fn check_pair(h_u: &[Vec<f64>], h_i: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    let (fu, du) = flatten(h_u)?;
    let (fi, di) = flatten(h_i)?;
    if h_u.len() != h_i.len() || du != di {
        return Err(shape_err(format!(
            "user side has {} hops of dim {du}, item side {} hops of dim {di}",
            h_u.len(),
            h_i.len()
        )));
    }
    Ok((fu, fi, h_u.len() - 1, du))
}

/// Writes the cross terms of flattened hop vectors into `out`.
pub fn write_terms(mode: CrossMode, hu: &[f64], hi: &[f64], depth: usize, dim: usize, out: &mut [f64]) {
    let hops = depth + 1;
    debug_assert_eq!(hu.len(), hops * dim);
    debug_assert_eq!(hi.len(), hops * dim);
    debug_assert_eq!(out.len(), mode.width(depth, dim));
    for lu in 0..hops {
        let a = &hu[lu * dim..(lu + 1) * dim];
        for li in 0..hops {
            let b = &hi[li * dim..(li + 1) * dim];
            let k = lu * hops + li;
            match mode {
                CrossMode::Hcc => out[k] = dot(a, b),
                CrossMode::Ecc => {
                    for ((o, x), y) in out[k * dim..(k + 1) * dim].iter_mut().zip(a).zip(b) {
                        *o = x * y;
                    }
                }
            }
        }
    }
}

/// Accumulates the hop-vector gradients implied by a cross-term gradient `dterms`.
pub fn backprop_terms(
    mode: CrossMode,
    hu: &[f64],
    hi: &[f64],
    depth: usize,
    dim: usize,
    dterms: &[f64],
    dhu: &mut [f64],
    dhi: &mut [f64],
) {
    let hops = depth + 1;
    for lu in 0..hops {
        for li in 0..hops {
            let k = lu * hops + li;
            let (ru, ri) = (lu * dim..(lu + 1) * dim, li * dim..(li + 1) * dim);
            match mode {
                CrossMode::Hcc => {
                    let g = dterms[k];
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..dim {
                        dhu[ru.start + c] += g * hi[ri.start + c];
                        dhi[ri.start + c] += g * hu[ru.start + c];
                    }
                }
                CrossMode::Ecc => {
                    let g = &dterms[k * dim..(k + 1) * dim];
                    for c in 0..dim {
                        dhu[ru.start + c] += g[c] * hi[ri.start + c];
                        dhi[ri.start + c] += g[c] * hu[ru.start + c];
                    }
                }
            }
        }
    }
}

/// `(L+1)^2` dot products between user and item hop vectors.
pub fn hcc_terms(h_u: &[Vec<f64>], h_i: &[Vec<f64>]) -> Result<CrossTerms> {
    terms(CrossMode::Hcc, h_u, h_i)
}

/// `(L+1)^2` Hadamard products between user and item hop vectors.
pub fn ecc_terms(h_u: &[Vec<f64>], h_i: &[Vec<f64>]) -> Result<CrossTerms> {
    terms(CrossMode::Ecc, h_u, h_i)
}

fn terms(mode: CrossMode, h_u: &[Vec<f64>], h_i: &[Vec<f64>]) -> Result<CrossTerms> {
    let (fu, fi, depth, dim) = check_pair(h_u, h_i)?;
    let mut values = vec![0.0; mode.width(depth, dim)];
    write_terms(mode, &fu, &fi, depth, dim, &mut values);
    Ok(CrossTerms {
        mode,
        depth,
        dim,
        values,
    })
}

/// Learnable part of a cross-correlated scorer: the mode, geometry and the head.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossHead {
    pub mode: CrossMode,
    pub depth: usize,
    pub dim: usize,
    pub head: MlpHead,
}

impl CrossHead {
    /// A fresh head whose input width is fixed by `mode`, `depth` and `dim`.
    pub fn new(mode: CrossMode, depth: usize, dim: usize, template: HeadConfig, rng: &mut Rng) -> Result<Self> {
        let cfg = HeadConfig {
            input_dim: mode.width(depth, dim),
            ..template
        };
        Self::with_head(mode, depth, dim, MlpHead::new(cfg, rng)?)
    }

    pub fn with_head(mode: CrossMode, depth: usize, dim: usize, head: MlpHead) -> Result<Self> {
        let want = mode.width(depth, dim);
        if head.input_dim() != want {
            return Err(shape_err(format!(
                "{} head for L={depth}, d={dim} needs input width {want}, got {}",
                mode.as_str(),
                head.input_dim()
            )));
        }
        Ok(Self {
            mode,
            depth,
            dim,
            head,
        })
    }

    /// Linear HCC head with weight 1 on every `(l, l)` term: the layer-wise
    /// concatenation score `sum_l h_u[l] . h_i[l]`.
    pub fn concat_equivalent(depth: usize, dim: usize) -> Result<Self> {
        let hops = depth + 1;
        let mut w = vec![0.0; hops * hops];
        for l in 0..hops {
            w[l * hops + l] = 1.0;
        }
        Self::with_head(CrossMode::Hcc, depth, dim, MlpHead::linear(&w, 0.0)?)
    }

    /// Linear HCC head with weights `w_u[l_u] * w_i[l_i]`: the weighted-sum score
    /// `(sum_l w_u[l] h_u[l]) . (sum_l w_i[l] h_i[l])`.
    pub fn weighted_sum_equivalent(w_u: &[f64], w_i: &[f64], dim: usize) -> Result<Self> {
        if w_u.len() != w_i.len() || w_u.is_empty() {
            return Err(shape_err("layer weight vectors must have equal, non-zero length"));
        }
        let w: Vec<f64> = w_u.iter().flat_map(|a| w_i.iter().map(move |b| a * b)).collect();
        Self::with_head(CrossMode::Hcc, w_u.len() - 1, dim, MlpHead::linear(&w, 0.0)?)
    }

    pub fn hop_width(&self) -> usize {
        (self.depth + 1) * self.dim
    }

    pub fn term_width(&self) -> usize {
        self.mode.width(self.depth, self.dim)
    }

    fn check_hops(&self, hu: &[f64], hi: &[f64]) -> Result<()> {
        let w = self.hop_width();
        if hu.len() != w || hi.len() != w {
            return Err(shape_err(format!(
                "expected flattened hop vectors of length {w}, got {} and {}",
                hu.len(),
                hi.len()
            )));
        }
        Ok(())
    }

    /// Cross-term rows for a batch of flattened `(user hops, item hops)` pairs.
    pub fn features(&self, pairs: &[(&[f64], &[f64])]) -> Result<DenseMatrix> {
        let width = self.term_width();
        let mut x = DenseMatrix::zeros(pairs.len(), width);
        for (r, (hu, hi)) in pairs.iter().enumerate() {
            self.check_hops(hu, hi)?;
            write_terms(self.mode, hu, hi, self.depth, self.dim, x.row_mut(r));
        }
        Ok(x)
    }

    /// Raw (pre-sigmoid) score of one pair from flattened hop vectors.
    pub fn score(&self, hu: &[f64], hi: &[f64], mode: Mode, rng: Option<&mut Rng>) -> Result<f64> {
        let x = self.features(&[(hu, hi)])?;
        let (out, _) = self.head.forward_batch(&x, mode, rng)?;
        Ok(out[0])
    }

    /// Eval-mode scores of one user against every row of `item_hops`
    /// (`n x (L+1)d`). The first linear map is refactored per user so the cost per
    /// item is `(L+1) d H_n` instead of the full term width times `H_n`.
    pub fn score_items(&self, hu: &[f64], item_hops: &DenseMatrix) -> Result<Vec<f64>> {
        let w = self.hop_width();
        if hu.len() != w || item_hops.cols() != w {
            return Err(shape_err("hop width mismatch in batched scoring"));
        }
        if item_hops.rows() == 0 {
            return Ok(Vec::new());
        }
        let weight = self.head.first_weight();
        let (out_dim, hops, dim) = (weight.rows(), self.depth + 1, self.dim);
        // projection[o, li*d + k] = sum_lu W[o, term(lu, li, k)] * hu[lu*d + k]
        let mut projection = DenseMatrix::zeros(out_dim, w);
        for o in 0..out_dim {
            let wrow = weight.row(o);
            let prow = projection.row_mut(o);
            for lu in 0..hops {
                let a = &hu[lu * dim..(lu + 1) * dim];
                for li in 0..hops {
                    let t = lu * hops + li;
                    let dst = &mut prow[li * dim..(li + 1) * dim];
                    match self.mode {
                        CrossMode::Hcc => {
                            let wt = wrow[t];
                            for (p, x) in dst.iter_mut().zip(a) {
                                *p += wt * x;
                            }
                        }
                        CrossMode::Ecc => {
                            for ((p, x), wt) in dst.iter_mut().zip(a).zip(&wrow[t * dim..(t + 1) * dim]) {
                                *p += wt * x;
                            }
                        }
                    }
                }
            }
        }
        let z = item_hops.matmul(Trans::No, &projection, Trans::Yes)?;
        self.head.eval_from_first_product(z)
    }
}

/// Relevance functions whose aggregation flexibility is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DofMode {
    Ngcf,
    LightGcn,
    Hcc,
    Ecc,
    HccLinear,
    EccLinear,
}

impl FromStr for DofMode {
    type Err = GcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ngcf" => Ok(Self::Ngcf),
            "lightgcn" => Ok(Self::LightGcn),
            "hcc" => Ok(Self::Hcc),
            "ecc" => Ok(Self::Ecc),
            "hcc-linear" => Ok(Self::HccLinear),
            "ecc-linear" => Ok(Self::EccLinear),
            other => Err(GcrError::Config(format!("unknown degrees-of-freedom mode {other:?}"))),
        }
    }
}

/// Number of free aggregation parameters over the cross-correlation terms.
///
/// NGCF's concatenation has none and LightGCN's weighted sum has `2(L+1)`. For the
/// cross-correlated heads the count is the size of the first learned map over
/// the terms: the term width times `H_n` with hidden layers, the term width alone
/// for a linear head.
pub fn degrees_of_freedom(mode: DofMode, depth: usize, dim: usize, hidden_units: usize, hidden_layers: usize) -> Result<u64> {
    let pairs = ((depth + 1) * (depth + 1)) as u64;
    let needs_dim = matches!(mode, DofMode::Ecc | DofMode::EccLinear);
    if needs_dim && dim == 0 {
        return Err(GcrError::Config("embedding dimension must be positive".into()));
    }
    let first_layer = |width: u64| -> Result<u64> {
        if hidden_layers == 0 {
            return Ok(width);
        }
        if hidden_units == 0 {
            return Err(GcrError::Config("hidden layers need a positive unit count".into()));
        }
        Ok(width * hidden_units as u64)
    };
    match mode {
        DofMode::Ngcf => Ok(0),
        DofMode::LightGcn => Ok(2 * (depth as u64 + 1)),
        DofMode::Hcc => first_layer(pairs),
        DofMode::Ecc => first_layer(pairs * dim as u64),
        DofMode::HccLinear => Ok(pairs),
        DofMode::EccLinear => Ok(pairs * dim as u64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTerm {
    pub lu: usize,
    pub li: usize,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_magnitude: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub mode: CrossMode,
    #[serde(rename = "L")]
    pub depth: usize,
    pub d: usize,
    pub terms: Vec<WeightTerm>,
}

/// Per-term weights of a linear cross head. ECC blocks also carry their share of
/// the total L1 weight mass.
pub fn export_cca_weights(cross: &CrossHead) -> Result<WeightReport> {
    if !cross.head.is_linear() {
        return Err(GcrError::Contract(
            "weight export needs a linear head; set model.H_l=0".into(),
        ));
    }
    let w = cross.head.first_weight().row(0);
    let hops = cross.depth + 1;
    let d = cross.dim;
    let total: f64 = w.iter().map(|x| x.abs()).sum();
    let mut terms = Vec::with_capacity(hops * hops);
    for lu in 0..hops {
        for li in 0..hops {
            let k = lu * hops + li;
            let label = format!("z^({lu}{li})");
            terms.push(match cross.mode {
                CrossMode::Hcc => WeightTerm {
                    lu,
                    li,
                    label,
                    weight: Some(w[k]),
                    weights: None,
                    norm_magnitude: None,
                },
                CrossMode::Ecc => {
                    let block = &w[k * d..(k + 1) * d];
                    let mass: f64 = block.iter().map(|x| x.abs()).sum();
                    WeightTerm {
                        lu,
                        li,
                        label,
                        weight: None,
                        weights: Some(block.to_vec()),
                        norm_magnitude: Some(if total > 0.0 { mass / total } else { 0.0 }),
                    }
                }
            });
        }
    }
    Ok(WeightReport {
        mode: cross.mode,
        depth: cross.depth,
        d,
        terms,
    })
}
