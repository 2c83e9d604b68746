//! Trainable relevance models: an embedding table, a representation that turns
//! embeddings into per-node hop vectors, and a scorer over user/item hop vectors.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{weighted_sum, Aggregation, Propagator, SuperVectorModel};
use crate::cca::{backprop_terms, CrossHead, CrossMode};
use crate::error::{shape_err, GcrError, Result};
use crate::eval::UserScorer;
use crate::graph::{BipartiteGraph, HopCap, HopIndex, Node, NodeKind};
use crate::pgr::{mean_into, EmbeddingTable, PgrTable};
use crate::rng::Rng;
use crate::tensor::{dot, DenseMatrix, HeadCache, HeadConfig, MlpHead, Mode, ParamRole, Trans};

/// How embeddings become the hop vectors a scorer sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// The embedding itself (a single hop).
    Raw,
    /// Per-hop mean pooling over exact-distance hop sets.
    Pgr,
    /// Normalised linear propagation layers.
    Gnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Inner product of raw embeddings.
    Dot,
    /// Feed-forward head on concatenated raw embeddings.
    Mlp,
    /// Concatenated propagation layers, dot product.
    Ngcf,
    /// Weighted-sum propagation layers, dot product.
    LightGcn,
    /// Hop-level cross terms over PGR readouts.
    Hcc,
    /// Element-level cross terms over PGR readouts.
    Ecc,
    /// Flattened PGR readouts through a three-hidden-layer head.
    PgrMlp,
    GnnHcc,
    GnnEcc,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        Self::Dot,
        Self::Mlp,
        Self::Ngcf,
        Self::LightGcn,
        Self::Hcc,
        Self::Ecc,
        Self::PgrMlp,
        Self::GnnHcc,
        Self::GnnEcc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dot => "dot",
            Self::Mlp => "mlp",
            Self::Ngcf => "ngcf",
            Self::LightGcn => "lightgcn",
            Self::Hcc => "hcc",
            Self::Ecc => "ecc",
            Self::PgrMlp => "pgr-mlp",
            Self::GnnHcc => "gnn-hcc",
            Self::GnnEcc => "gnn-ecc",
        }
    }

    pub fn representation(self) -> Representation {
        match self {
            Self::Dot | Self::Mlp => Representation::Raw,
            Self::Hcc | Self::Ecc | Self::PgrMlp => Representation::Pgr,
            Self::Ngcf | Self::LightGcn | Self::GnnHcc | Self::GnnEcc => Representation::Gnn,
        }
    }

    pub fn cross_mode(self) -> Option<CrossMode> {
        match self {
            Self::Hcc | Self::GnnHcc => Some(CrossMode::Hcc),
            Self::Ecc | Self::GnnEcc => Some(CrossMode::Ecc),
            _ => None,
        }
    }
}

impl FromStr for ModelKind {
    type Err = GcrError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        let s = match s.as_str() {
            "pgr-hcc" | "gcr-hcc" => "hcc",
            "pgr-ecc" | "gcr-ecc" | "gcr" => "ecc",
            other => other,
        };
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| GcrError::Config(format!("unknown model mode {s:?}")))
    }
}

/// Everything needed to build a fresh model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub depth: usize,
    pub dim: usize,
    /// Head hyper-parameters; the input width is derived from the kind.
    pub head: HeadConfig,
    pub init_std: f64,
    /// Train the LightGCN layer weights instead of keeping them uniform.
    pub train_layer_weights: bool,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            depth: 2,
            dim: 64,
            head: HeadConfig::with_input(1),
            init_std: 0.01,
            train_layer_weights: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(GcrError::Config("embedding dimension must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(GcrError::Config("embedding init std must be positive".into()));
        }
        HeadConfig { input_dim: 1, ..self.head }.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    /// Inner product of the flattened hop vectors.
    Dot,
    SuperVector(SuperVectorModel),
    /// Head on `[h_u || h_i]`.
    Mlp(MlpHead),
    Cross(CrossHead),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceModel {
    pub kind: ModelKind,
    pub depth: usize,
    pub embeddings: EmbeddingTable,
    pub scorer: Scorer,
}

fn head_for(template: HeadConfig, input_dim: usize, hidden_layers: usize) -> HeadConfig {
    HeadConfig {
        input_dim,
        hidden_layers,
        ..template
    }
}

impl RelevanceModel {
    pub fn new(spec: &ModelSpec, num_users: usize, num_items: usize, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let embeddings = EmbeddingTable::normal(num_users, num_items, spec.dim, spec.init_std, rng)?;
        let scorer = Self::fresh_scorer(spec, rng)?;
        Self::from_parts(spec.kind, spec.depth, embeddings, scorer)
    }

    fn fresh_scorer(spec: &ModelSpec, rng: &mut Rng) -> Result<Scorer> {
        let (l, d) = (spec.depth, spec.dim);
        Ok(match spec.kind {
            ModelKind::Dot => Scorer::Dot,
            ModelKind::Mlp => Scorer::Mlp(MlpHead::new(head_for(spec.head, 2 * d, spec.head.hidden_layers), rng)?),
            ModelKind::PgrMlp => Scorer::Mlp(MlpHead::new(head_for(spec.head, 2 * (l + 1) * d, 3), rng)?),
            ModelKind::Ngcf => Scorer::SuperVector(SuperVectorModel::concat(l)),
            ModelKind::LightGcn => {
                let mut sv = SuperVectorModel::uniform(l);
                sv.trainable = spec.train_layer_weights;
                Scorer::SuperVector(sv)
            }
            kind => {
                let mode = kind.cross_mode().expect("cross kinds handled here");
                Scorer::Cross(CrossHead::new(mode, l, d, spec.head, rng)?)
            }
        })
    }

    /// Assembles a model from existing parts, checking that the scorer fits.
    pub fn from_parts(kind: ModelKind, depth: usize, embeddings: EmbeddingTable, scorer: Scorer) -> Result<Self> {
        let model = Self {
            kind,
            depth,
            embeddings,
            scorer,
        };
        let w = model.hop_width();
        let ok = match (&model.scorer, kind) {
            (Scorer::Dot, ModelKind::Dot) => true,
            (Scorer::Mlp(h), ModelKind::Mlp | ModelKind::PgrMlp) => h.input_dim() == 2 * w,
            (Scorer::SuperVector(sv), ModelKind::Ngcf | ModelKind::LightGcn) => sv.depth == depth,
            (Scorer::Cross(c), k) => {
                k.cross_mode() == Some(c.mode) && c.depth == depth && c.dim == model.dim()
            }
            _ => false,
        };
        if !ok {
            return Err(shape_err(format!(
                "scorer does not fit a {} model with L={depth}, d={}",
                kind.as_str(),
                model.dim()
            )));
        }
        Ok(model)
    }

    pub fn representation(&self) -> Representation {
        self.kind.representation()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    /// Number of hop vectors per node the scorer consumes.
    pub fn hops(&self) -> usize {
        match self.representation() {
            Representation::Raw => 1,
            _ => self.depth + 1,
        }
    }

    pub fn hop_width(&self) -> usize {
        self.hops() * self.dim()
    }

    pub fn head(&self) -> Option<&MlpHead> {
        match &self.scorer {
            Scorer::Mlp(h) => Some(h),
            Scorer::Cross(c) => Some(&c.head),
            _ => None,
        }
    }

    pub fn head_mut(&mut self) -> Option<&mut MlpHead> {
        match &mut self.scorer {
            Scorer::Mlp(h) => Some(h),
            Scorer::Cross(c) => Some(&mut c.head),
            _ => None,
        }
    }

    fn trainable_layer_weights(&self) -> Option<(&[f64], &[f64])> {
        match &self.scorer {
            Scorer::SuperVector(SuperVectorModel {
                aggregation: Aggregation::WeightedSum { w_u, w_i },
                trainable: true,
                ..
            }) => Some((w_u, w_i)),
            _ => None,
        }
    }

    /// Trainable tensors in a fixed order with names and regularisation roles.
    pub fn params(&self) -> Vec<(String, DenseMatrix, ParamRole)> {
        let mut out = vec![
            ("emb.users".to_string(), self.embeddings.users.clone(), ParamRole::Embedding),
            ("emb.items".to_string(), self.embeddings.items.clone(), ParamRole::Embedding),
        ];
        if let Some(head) = self.head() {
            for (name, t, role) in head.params() {
                out.push((format!("head.{name}"), t.clone(), role));
            }
        }
        if let Some((w_u, w_i)) = self.trainable_layer_weights() {
            out.push(("layers.w_u".into(), DenseMatrix::row_vector(w_u), ParamRole::Bias));
            out.push(("layers.w_i".into(), DenseMatrix::row_vector(w_i), ParamRole::Bias));
        }
        out
    }

    /// Overwrites every trainable tensor, in [`Self::params`] order.
    pub fn set_params(&mut self, values: &[DenseMatrix]) -> Result<()> {
        let want = self.params();
        if values.len() != want.len() {
            return Err(shape_err(format!("expected {} tensors, got {}", want.len(), values.len())));
        }
        for ((name, t, _), v) in want.iter().zip(values) {
            if t.shape() != v.shape() {
                return Err(shape_err(format!("tensor {name}: expected {:?}, got {:?}", t.shape(), v.shape())));
            }
        }
        let mut it = values.iter();
        self.embeddings.users = it.next().expect("checked").clone();
        self.embeddings.items = it.next().expect("checked").clone();
        if let Some(head) = self.head_mut() {
            for p in head.params_mut() {
                *p = it.next().expect("checked").clone();
            }
        }
        if let Scorer::SuperVector(SuperVectorModel {
            aggregation: Aggregation::WeightedSum { w_u, w_i },
            trainable: true,
            ..
        }) = &mut self.scorer
        {
            *w_u = it.next().expect("checked").data().to_vec();
            *w_i = it.next().expect("checked").data().to_vec();
        }
        Ok(())
    }

    /// Applies `f` to every trainable tensor in [`Self::params`] order.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [&mut DenseMatrix]) -> Result<()>) -> Result<()> {
        let mut weights = self
            .trainable_layer_weights()
            .map(|(u, i)| (DenseMatrix::row_vector(u), DenseMatrix::row_vector(i)));
        {
            let mut list: Vec<&mut DenseMatrix> = vec![&mut self.embeddings.users, &mut self.embeddings.items];
            match &mut self.scorer {
                Scorer::Mlp(h) => list.extend(h.params_mut()),
                Scorer::Cross(c) => list.extend(c.head.params_mut()),
                _ => {}
            }
            if let Some((u, i)) = weights.as_mut() {
                list.push(u);
                list.push(i);
            }
            f(&mut list)?;
        }
        if let (Some((u, i)), Scorer::SuperVector(sv)) = (weights, &mut self.scorer) {
            sv.aggregation = Aggregation::WeightedSum {
                w_u: u.into_vec(),
                w_i: i.into_vec(),
            };
        }
        Ok(())
    }

    /// `sum ||E||^2 + sum ||W||^2` over embeddings and head weight matrices.
    pub fn l2_norm_sq(&self) -> f64 {
        let mut s = self.embeddings.users.squared_norm() + self.embeddings.items.squared_norm();
        if let Some(head) = self.head() {
            s += head
                .params()
                .iter()
                .filter(|(_, _, role)| role.decays())
                .map(|(_, t, _)| t.squared_norm())
                .sum::<f64>();
        }
        s
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if let Some(head) = self.head_mut() {
            head.set_dropout(rate)?;
        }
        Ok(())
    }
}

/// Graph-derived state a model needs to compute hop vectors.
pub struct Context<'g> {
    pub graph: &'g BipartiteGraph,
    hops: Option<HopIndex>,
    propagator: Option<Propagator<'g>>,
}

impl<'g> Context<'g> {
    pub fn new(model: &RelevanceModel, graph: &'g BipartiteGraph, cap: Option<HopCap>) -> Result<Self> {
        model.embeddings.matches_graph(graph)?;
        let (hops, propagator) = match model.representation() {
            Representation::Raw => (None, None),
            Representation::Pgr => (Some(HopIndex::build(graph, model.depth, cap)?), None),
            Representation::Gnn => (None, Some(Propagator::new(graph))),
        };
        Ok(Self {
            graph,
            hops,
            propagator,
        })
    }

    pub fn hop_index(&self) -> Option<&HopIndex> {
        self.hops.as_ref()
    }

    /// Hop vectors of every user and item from the current embeddings.
    pub fn full_tables(&self, model: &RelevanceModel) -> Result<(DenseMatrix, DenseMatrix)> {
        let emb = &model.embeddings;
        match model.representation() {
            Representation::Raw => Ok((emb.users.clone(), emb.items.clone())),
            Representation::Pgr => {
                let t = PgrTable::from_index(self.hops.as_ref().expect("pgr context"), emb)?;
                Ok((t.users().clone(), t.items().clone()))
            }
            Representation::Gnn => {
                let t = self.propagator.as_ref().expect("gnn context").layers(emb, model.depth)?;
                Ok((t.users().clone(), t.items().clone()))
            }
        }
    }
}

/// Sorted distinct ids plus the position of each input id in that list.
fn localise(ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut uniq = ids.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let pos = ids.iter().map(|id| uniq.binary_search(id).expect("present")).collect();
    (uniq, pos)
}

/// Hop vectors for the nodes touched by a batch.
struct BatchRep {
    users: Vec<usize>,
    items: Vec<usize>,
    user_rows: DenseMatrix,
    item_rows: DenseMatrix,
    user_pos: Vec<usize>,
    item_pos: Vec<usize>,
}

fn batch_rep(model: &RelevanceModel, ctx: &Context, pair_users: &[usize], pair_items: &[usize]) -> Result<BatchRep> {
    let emb = &model.embeddings;
    let w = model.hop_width();
    let d = model.dim();
    if let Some(&u) = pair_users.iter().find(|&&u| u >= emb.num_users()) {
        return Err(GcrError::Index(format!("user {u} out of range")));
    }
    if let Some(&i) = pair_items.iter().find(|&&i| i >= emb.num_items()) {
        return Err(GcrError::Index(format!("item {i} out of range")));
    }
    match model.representation() {
        Representation::Gnn => {
            let (users_t, items_t) = ctx.full_tables(model)?;
            Ok(BatchRep {
                users: (0..emb.num_users()).collect(),
                items: (0..emb.num_items()).collect(),
                user_rows: users_t,
                item_rows: items_t,
                user_pos: pair_users.to_vec(),
                item_pos: pair_items.to_vec(),
            })
        }
        repr => {
            let (users, user_pos) = localise(pair_users);
            let (items, item_pos) = localise(pair_items);
            let fill = |kind: NodeKind, ids: &[usize]| -> DenseMatrix {
                let mut rows = DenseMatrix::zeros(ids.len(), w);
                for (r, &id) in ids.iter().enumerate() {
                    let out = rows.row_mut(r);
                    if repr == Representation::Raw {
                        out.copy_from_slice(emb.of(kind).row(id));
                    } else {
                        let sets = ctx.hops.as_ref().expect("pgr context").get(Node { kind, index: id });
                        for (l, hop) in sets.hops.iter().enumerate() {
                            mean_into(emb.of(hop.kind), &hop.nodes, &mut out[l * d..(l + 1) * d]);
                        }
                    }
                }
                rows
            };
            Ok(BatchRep {
                user_rows: fill(NodeKind::User, &users),
                item_rows: fill(NodeKind::Item, &items),
                users,
                items,
                user_pos,
                item_pos,
            })
        }
    }
}

/// Gradient wrt the embeddings given gradients wrt the batch hop rows.
fn backprop_rep(
    model: &RelevanceModel,
    ctx: &Context,
    rep: &BatchRep,
    d_user_rows: &DenseMatrix,
    d_item_rows: &DenseMatrix,
) -> (DenseMatrix, DenseMatrix) {
    let emb = &model.embeddings;
    let d = model.dim();
    match model.representation() {
        Representation::Gnn => ctx
            .propagator
            .as_ref()
            .expect("gnn context")
            .backprop(d_user_rows, d_item_rows, model.depth, d),
        repr => {
            let mut gu = DenseMatrix::zeros(emb.num_users(), d);
            let mut gi = DenseMatrix::zeros(emb.num_items(), d);
            for (kind, ids, rows) in [
                (NodeKind::User, &rep.users, d_user_rows),
                (NodeKind::Item, &rep.items, d_item_rows),
            ] {
                for (r, &id) in ids.iter().enumerate() {
                    let g = rows.row(r);
                    if repr == Representation::Raw {
                        let dst = match kind {
                            NodeKind::User => gu.row_mut(id),
                            NodeKind::Item => gi.row_mut(id),
                        };
                        dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                        continue;
                    }
                    let sets = ctx.hops.as_ref().expect("pgr context").get(Node { kind, index: id });
                    for (l, hop) in sets.hops.iter().enumerate() {
                        if hop.nodes.is_empty() {
                            continue;
                        }
                        let gl = &g[l * d..(l + 1) * d];
                        if gl.iter().all(|v| *v == 0.0) {
                            continue;
                        }
                        let share = 1.0 / hop.nodes.len() as f64;
                        let table = match hop.kind {
                            NodeKind::User => &mut gu,
                            NodeKind::Item => &mut gi,
                        };
                        for &m in &hop.nodes {
                            for (a, b) in table.row_mut(m).iter_mut().zip(gl) {
                                *a += share * b;
                            }
                        }
                    }
                }
            }
            (gu, gi)
        }
    }
}

/// Forward state of a scorer over a batch of pair rows.
pub(crate) enum ScorerCache {
    None,
    Head { cache: HeadCache },
}

fn gather(rows: &DenseMatrix, pos: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(pos.len(), rows.cols());
    for (r, &p) in pos.iter().enumerate() {
        out.row_mut(r).copy_from_slice(rows.row(p));
    }
    out
}

impl Scorer {
    fn forward(
        &self,
        hu: &DenseMatrix,
        hi: &DenseMatrix,
        dim: usize,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<(Vec<f64>, ScorerCache)> {
        let n = hu.rows();
        match self {
            Scorer::Dot => Ok(((0..n).map(|r| dot(hu.row(r), hi.row(r))).collect(), ScorerCache::None)),
            Scorer::SuperVector(sv) => Ok((
                (0..n).map(|r| sv.score_flat(hu.row(r), hi.row(r), dim)).collect(),
                ScorerCache::None,
            )),
            Scorer::Mlp(head) => {
                let w = hu.cols();
                let mut x = DenseMatrix::zeros(n, 2 * w);
                for r in 0..n {
                    let row = x.row_mut(r);
                    row[..w].copy_from_slice(hu.row(r));
                    row[w..].copy_from_slice(hi.row(r));
                }
                let (s, cache) = head.forward_batch(&x, mode, rng)?;
                Ok((s, ScorerCache::Head { cache }))
            }
            Scorer::Cross(cross) => {
                let pairs: Vec<(&[f64], &[f64])> = (0..n).map(|r| (hu.row(r), hi.row(r))).collect();
                let x = cross.features(&pairs)?;
                let (s, cache) = cross.head.forward_batch(&x, mode, rng)?;
                Ok((s, ScorerCache::Head { cache }))
            }
        }
    }

    /// Gradients wrt the pair hop rows and the scorer's own tensors (head
    /// params, then trainable layer weights).
    fn backward(
        &self,
        cache: &ScorerCache,
        hu: &DenseMatrix,
        hi: &DenseMatrix,
        dim: usize,
        upstream: &[f64],
    ) -> Result<(DenseMatrix, DenseMatrix, Vec<DenseMatrix>)> {
        let (n, w) = hu.shape();
        let mut dhu = DenseMatrix::zeros(n, w);
        let mut dhi = DenseMatrix::zeros(n, w);
        let mut own = Vec::new();
        match (self, cache) {
            (Scorer::Dot, _) => {
                for r in 0..n {
                    let g = upstream[r];
                    dhu.row_mut(r).iter_mut().zip(hi.row(r)).for_each(|(a, b)| *a = g * b);
                    dhi.row_mut(r).iter_mut().zip(hu.row(r)).for_each(|(a, b)| *a = g * b);
                }
            }
            (Scorer::SuperVector(sv), _) => {
                let hops = sv.depth + 1;
                let (w_u, w_i) = match &sv.aggregation {
                    Aggregation::Concat => (vec![], vec![]),
                    Aggregation::WeightedSum { w_u, w_i } => (w_u.clone(), w_i.clone()),
                };
                let mut gwu = vec![0.0; hops];
                let mut gwi = vec![0.0; hops];
                for r in 0..n {
                    let g = upstream[r];
                    if w_u.is_empty() {
                        dhu.row_mut(r).iter_mut().zip(hi.row(r)).for_each(|(a, b)| *a = g * b);
                        dhi.row_mut(r).iter_mut().zip(hu.row(r)).for_each(|(a, b)| *a = g * b);
                        continue;
                    }
                    let su = weighted_sum(hu.row(r), &w_u, dim);
                    let si = weighted_sum(hi.row(r), &w_i, dim);
                    for l in 0..hops {
                        let blk = l * dim..(l + 1) * dim;
                        for (k, c) in blk.clone().enumerate() {
                            dhu.row_mut(r)[c] = g * w_u[l] * si[k];
                            dhi.row_mut(r)[c] = g * w_i[l] * su[k];
                        }
                        gwu[l] += g * dot(&hu.row(r)[blk.clone()], &si);
                        gwi[l] += g * dot(&hi.row(r)[blk], &su);
                    }
                }
                if sv.trainable {
                    own.push(DenseMatrix::row_vector(&gwu));
                    own.push(DenseMatrix::row_vector(&gwi));
                }
            }
            (Scorer::Mlp(head), ScorerCache::Head { cache, .. }) => {
                let grads = head.backward(cache, upstream)?;
                for r in 0..n {
                    let g = grads.input.row(r);
                    dhu.row_mut(r).copy_from_slice(&g[..w]);
                    dhi.row_mut(r).copy_from_slice(&g[w..]);
                }
                own = grads.params;
            }
            (Scorer::Cross(cross), ScorerCache::Head { cache, .. }) => {
                let grads = cross.head.backward(cache, upstream)?;
                for r in 0..n {
                    backprop_terms(
                        cross.mode,
                        hu.row(r),
                        hi.row(r),
                        cross.depth,
                        cross.dim,
                        grads.input.row(r),
                        dhu.row_mut(r),
                        dhi.row_mut(r),
                    );
                }
                own = grads.params;
            }
            _ => return Err(GcrError::Contract("scorer cache does not match scorer".into())),
        }
        Ok((dhu, dhi, own))
    }
}

/// Scored pairs of one batch: rows `0..n` come from `(users[k], items[k])`.
pub struct PairForward {
    pub scores: Vec<f64>,
    rep: BatchRep,
    hu: DenseMatrix,
    hi: DenseMatrix,
    cache: ScorerCache,
}

impl PairForward {
    pub fn head_cache(&self) -> Option<&HeadCache> {
        match &self.cache {
            ScorerCache::Head { cache, .. } => Some(cache),
            ScorerCache::None => None,
        }
    }
}

impl RelevanceModel {
    /// Scores `(users[k], items[k])` from live embeddings.
    pub fn forward_pairs(
        &self,
        ctx: &Context,
        users: &[usize],
        items: &[usize],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<PairForward> {
        if users.len() != items.len() {
            return Err(shape_err("pair lists differ in length"));
        }
        let rep = batch_rep(self, ctx, users, items)?;
        let hu = gather(&rep.user_rows, &rep.user_pos);
        let hi = gather(&rep.item_rows, &rep.item_pos);
        let (scores, cache) = self.scorer.forward(&hu, &hi, self.dim(), mode, rng)?;
        Ok(PairForward {
            scores,
            rep,
            hu,
            hi,
            cache,
        })
    }

    /// Gradients of `sum_k upstream[k] * score_k` for every tensor in [`Self::params`] order.
    pub fn backward_pairs(&self, ctx: &Context, fwd: &PairForward, upstream: &[f64]) -> Result<Vec<DenseMatrix>> {
        if upstream.len() != fwd.scores.len() {
            return Err(shape_err("upstream gradient length differs from batch"));
        }
        let (dhu, dhi, own) = self.scorer.backward(&fwd.cache, &fwd.hu, &fwd.hi, self.dim(), upstream)?;
        let w = self.hop_width();
        let mut d_user_rows = DenseMatrix::zeros(fwd.rep.user_rows.rows(), w);
        let mut d_item_rows = DenseMatrix::zeros(fwd.rep.item_rows.rows(), w);
        for (r, &p) in fwd.rep.user_pos.iter().enumerate() {
            d_user_rows.row_mut(p).iter_mut().zip(dhu.row(r)).for_each(|(a, b)| *a += b);
        }
        for (r, &p) in fwd.rep.item_pos.iter().enumerate() {
            d_item_rows.row_mut(p).iter_mut().zip(dhi.row(r)).for_each(|(a, b)| *a += b);
        }
        let (gu, gi) = backprop_rep(self, ctx, &fwd.rep, &d_user_rows, &d_item_rows);
        let mut grads = vec![gu, gi];
        grads.extend(own);
        Ok(grads)
    }

    /// Commits batch-norm statistics gathered by a train-mode forward pass.
    pub fn commit(&mut self, fwd: &PairForward) -> Result<()> {
        if let (Some(cache), Some(head)) = (fwd.head_cache(), self.head_mut()) {
            head.commit_batch_stats(cache)?;
        }
        Ok(())
    }
}

/// Eval-mode scorer over fixed hop tables (live or loaded from a cache).
pub struct Inference<'m> {
    model: &'m RelevanceModel,
    users: DenseMatrix,
    items: DenseMatrix,
    /// Per-item part of the first product or weighted sums, precomputed once.
    item_aux: Option<DenseMatrix>,
    prep_seconds: f64,
}

impl<'m> Inference<'m> {
    pub fn new(model: &'m RelevanceModel, ctx: &Context) -> Result<Self> {
        let t0 = Instant::now();
        let (users, items) = ctx.full_tables(model)?;
        let mut inf = Self::from_tables(model, users, items)?;
        inf.prep_seconds = t0.elapsed().as_secs_f64();
        Ok(inf)
    }

    /// Uses precomputed readouts; raw models take the embeddings as-is.
    pub fn from_cache(model: &'m RelevanceModel, table: &PgrTable) -> Result<Self> {
        match model.representation() {
            Representation::Raw => Self::from_tables(model, model.embeddings.users.clone(), model.embeddings.items.clone()),
            _ => {
                table.check_shape(model.depth, model.dim(), model.embeddings.num_users(), model.embeddings.num_items())?;
                Self::from_tables(model, table.users().clone(), table.items().clone())
            }
        }
    }

    pub fn from_tables(model: &'m RelevanceModel, users: DenseMatrix, items: DenseMatrix) -> Result<Self> {
        let w = model.hop_width();
        if users.cols() != w || items.cols() != w {
            return Err(shape_err(format!("hop tables must be {w} wide")));
        }
        let item_aux = match &model.scorer {
            Scorer::Mlp(head) => {
                let wt = head.first_weight();
                let mut right = DenseMatrix::zeros(wt.rows(), w);
                for o in 0..wt.rows() {
                    right.row_mut(o).copy_from_slice(&wt.row(o)[w..]);
                }
                Some(items.matmul(Trans::No, &right, Trans::Yes)?)
            }
            Scorer::SuperVector(SuperVectorModel {
                aggregation: Aggregation::WeightedSum { w_i, .. },
                ..
            }) => {
                let d = model.dim();
                let mut sums = DenseMatrix::zeros(items.rows(), d);
                for r in 0..items.rows() {
                    sums.row_mut(r).copy_from_slice(&weighted_sum(items.row(r), w_i, d));
                }
                Some(sums)
            }
            _ => None,
        };
        Ok(Self {
            model,
            users,
            items,
            item_aux,
            prep_seconds: 0.0,
        })
    }

    pub fn user_hops(&self, user: usize) -> &[f64] {
        self.users.row(user)
    }

    pub fn item_hops(&self, item: usize) -> &[f64] {
        self.items.row(item)
    }

    fn check_user(&self, user: usize) -> Result<()> {
        if user >= self.users.rows() {
            return Err(GcrError::Index(format!("user {user} out of range")));
        }
        Ok(())
    }

    /// Eval-mode scores of explicit pairs.
    pub fn score_pairs(&self, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        for &(u, i) in pairs {
            self.check_user(u)?;
            if i >= self.items.rows() {
                return Err(GcrError::Index(format!("item {i} out of range")));
            }
        }
        if let Scorer::Cross(c) = &self.model.scorer {
            return self.score_pairs_by_user(c, pairs);
        }
        let mut out = Vec::with_capacity(pairs.len());
        let d = self.model.dim();
        for &(u, i) in pairs {
            let (hu, hi) = (self.users.row(u), self.items.row(i));
            out.push(match &self.model.scorer {
                Scorer::Dot => dot(hu, hi),
                Scorer::SuperVector(sv) => sv.score_flat(hu, hi, d),
                Scorer::Mlp(head) => head.forward(&[hu, hi].concat(), Mode::Eval, None)?.0,
                Scorer::Cross(c) => c.score(hu, hi, Mode::Eval, None)?,
            });
        }
        Ok(out)
    }

    /// Groups pairs by user so the first cross-head map is refactored once per user.
    fn score_pairs_by_user(&self, cross: &CrossHead, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by_key(|&k| pairs[k].0);
        let mut out = vec![0.0; pairs.len()];
        for group in order.chunk_by(|&a, &b| pairs[a].0 == pairs[b].0) {
            let mut hops = DenseMatrix::zeros(group.len(), self.items.cols());
            for (r, &k) in group.iter().enumerate() {
                hops.row_mut(r).copy_from_slice(self.items.row(pairs[k].1));
            }
            let scores = cross.score_items(self.users.row(pairs[group[0]].0), &hops)?;
            for (&k, s) in group.iter().zip(scores) {
                out[k] = s;
            }
        }
        Ok(out)
    }
}

impl UserScorer for Inference<'_> {
    fn num_items(&self) -> usize {
        self.items.rows()
    }

    fn score_user(&self, user: usize) -> Result<Vec<f64>> {
        self.check_user(user)?;
        let hu = self.users.row(user);
        let d = self.model.dim();
        match &self.model.scorer {
            Scorer::Dot | Scorer::SuperVector(SuperVectorModel { aggregation: Aggregation::Concat, .. }) => {
                Ok((0..self.items.rows()).map(|i| dot(hu, self.items.row(i))).collect())
            }
            Scorer::SuperVector(SuperVectorModel {
                aggregation: Aggregation::WeightedSum { w_u, .. },
                ..
            }) => {
                let su = weighted_sum(hu, w_u, d);
                let sums = self.item_aux.as_ref().expect("weighted sums precomputed");
                Ok((0..sums.rows()).map(|i| dot(&su, sums.row(i))).collect())
            }
            Scorer::Mlp(head) => {
                let w = hu.len();
                let wt = head.first_weight();
                let left: Vec<f64> = (0..wt.rows()).map(|o| dot(&wt.row(o)[..w], hu)).collect();
                let mut z = self.item_aux.as_ref().expect("item products precomputed").clone();
                for r in 0..z.rows() {
                    z.row_mut(r).iter_mut().zip(&left).for_each(|(a, b)| *a += b);
                }
                head.eval_from_first_product(z)
            }
            Scorer::Cross(c) => c.score_items(hu, &self.items),
        }
    }

    fn prep_seconds(&self) -> f64 {
        self.prep_seconds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use crate::tensor::grad_check;
    use rand::Rng as _;

    fn graph(rng: &mut Rng, nu: usize, ni: usize, p: f64) -> BipartiteGraph {
        let mut edges = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                if rng.random_bool(p) {
                    edges.push((u, i));
                }
            }
        }
        BipartiteGraph::from_edges(nu, ni, &edges).unwrap()
    }

    fn small_spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            depth: 2,
            dim: 3,
            head: HeadConfig {
                hidden_units: 5,
                dropout: 0.0,
                ..HeadConfig::with_input(1)
            },
            init_std: 0.5,
            train_layer_weights: true,
            ..ModelSpec::new(kind)
        }
    }

    fn flatten(ts: &[DenseMatrix]) -> Vec<f64> {
        ts.iter().flat_map(|t| t.data().to_vec()).collect()
    }

    fn unflatten(like: &[DenseMatrix], flat: &[f64]) -> Vec<DenseMatrix> {
        let mut off = 0;
        like.iter()
            .map(|t| {
                let m = DenseMatrix::from_vec(t.rows(), t.cols(), flat[off..off + t.len()].to_vec()).unwrap();
                off += t.len();
                m
            })
            .collect()
    }

    #[test]
    fn kinds_round_trip_and_aliases() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert_eq!("gcr".parse::<ModelKind>().unwrap(), ModelKind::Ecc);
        assert_eq!("PGR-HCC".parse::<ModelKind>().unwrap(), ModelKind::Hcc);
        assert!("gat".parse::<ModelKind>().is_err());
    }

    #[test]
    fn declared_input_widths() {
        let mut rng = rng::stream(1, Stream::Init);
        let (l, d) = (2, 3);
        let mut width = |k| {
            let m = RelevanceModel::new(&small_spec(k), 4, 5, &mut rng).unwrap();
            m.head().map(|h| (h.input_dim(), h.config().hidden_layers))
        };
        assert_eq!(width(ModelKind::Hcc), Some(((l + 1) * (l + 1), 1)));
        assert_eq!(width(ModelKind::Ecc), Some(((l + 1) * (l + 1) * d, 1)));
        assert_eq!(width(ModelKind::GnnEcc), Some(((l + 1) * (l + 1) * d, 1)));
        assert_eq!(width(ModelKind::PgrMlp), Some((2 * (l + 1) * d, 3)));
        assert_eq!(width(ModelKind::Mlp), Some((2 * d, 1)));
        assert_eq!(width(ModelKind::Dot), None);
    }

    #[test]
    fn gradients_for_every_kind() {
        for (seed, kind) in ModelKind::ALL.into_iter().enumerate() {
            let mut rng = rng::stream(seed as u64, Stream::Init);
            let g = graph(&mut rng, 7, 6, 0.35);
            let model = RelevanceModel::new(&small_spec(kind), 7, 6, &mut rng).unwrap();
            let ctx = Context::new(&model, &g, None).unwrap();
            let users = vec![0, 3, 3, 6, 1];
            let items = vec![2, 2, 5, 0, 4];
            let coef: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let base: Vec<DenseMatrix> = model.params().into_iter().map(|p| p.1).collect();
            let fwd = model.forward_pairs(&ctx, &users, &items, Mode::Eval, None).unwrap();
            let analytic = flatten(&model.backward_pairs(&ctx, &fwd, &coef).unwrap());
            let err = grad_check(&flatten(&base), 1e-6, |x| {
                let mut m = model.clone();
                m.set_params(&unflatten(&base, x)).unwrap();
                let f = m.forward_pairs(&ctx, &users, &items, Mode::Eval, None)?;
                Ok((dot(&f.scores, &coef), analytic.clone()))
            })
            .unwrap();
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }

    #[test]
    fn inference_matches_live_forward() {
        for (seed, kind) in ModelKind::ALL.into_iter().enumerate() {
            let mut rng = rng::stream(100 + seed as u64, Stream::Init);
            let g = graph(&mut rng, 6, 8, 0.3);
            let model = RelevanceModel::new(&small_spec(kind), 6, 8, &mut rng).unwrap();
            let ctx = Context::new(&model, &g, None).unwrap();
            let inf = Inference::new(&model, &ctx).unwrap();
            for u in 0..6 {
                let all = inf.score_user(u).unwrap();
                let fwd = model.forward_pairs(&ctx, &vec![u; 8], &(0..8).collect::<Vec<_>>(), Mode::Eval, None).unwrap();
                let pairs: Vec<_> = (0..8).map(|i| (u, i)).collect();
                let direct = inf.score_pairs(&pairs).unwrap();
                for i in 0..8 {
                    assert!((all[i] - fwd.scores[i]).abs() < 1e-12, "{kind:?}");
                    assert!((direct[i] - fwd.scores[i]).abs() < 1e-12, "{kind:?}");
                }
            }
        }
    }

    #[test]
    fn params_round_trip_and_l2() {
        let mut rng = rng::stream(7, Stream::Init);
        let mut model = RelevanceModel::new(&small_spec(ModelKind::Ecc), 3, 4, &mut rng).unwrap();
        let params: Vec<DenseMatrix> = model.params().into_iter().map(|p| p.1).collect();
        let direct: f64 = model
            .params()
            .iter()
            .filter(|(_, _, r)| r.decays())
            .map(|(_, t, _)| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        assert!((model.l2_norm_sq() - direct).abs() < 1e-12);
        let before = model.clone();
        model.set_params(&params).unwrap();
        assert_eq!(model.params().len(), before.params().len());
        assert!(model.set_params(&params[..2]).is_err());
    }

    #[test]
    fn out_of_range_pairs() {
        let mut rng = rng::stream(8, Stream::Init);
        let g = graph(&mut rng, 3, 3, 0.5);
        let model = RelevanceModel::new(&small_spec(ModelKind::Hcc), 3, 3, &mut rng).unwrap();
        let ctx = Context::new(&model, &g, None).unwrap();
        assert!(model.forward_pairs(&ctx, &[5], &[0], Mode::Eval, None).is_err());
        assert!(model.forward_pairs(&ctx, &[0, 1], &[0], Mode::Eval, None).is_err());
    }
}
