use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{bce_loss_grad, bpr_loss_grad};
use super::model::{Context, Inference, ModelKind, RelevanceModel, Scorer};
use super::sampling::{sample_with_index, BprTriple, PositiveIndex};
use crate::baselines::SuperVectorModel;
use crate::cca::CrossHead;
use crate::error::{GcrError, Result};
use crate::eval::{auc, evaluate, masks_by_user};
use crate::graph::{BipartiteGraph, HopCap, Interaction, InteractionSet};
use crate::pgr::EmbeddingTable;
use crate::rng::{self, Rng, Stream};
use crate::tensor::{load_manifest, load_tensors, save_tensors, AdamState, DenseMatrix, HeadConfig, MlpHead, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Bpr,
    Bce,
}

impl FromStr for Objective {
    type Err = GcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpr" => Ok(Self::Bpr),
            "bce" => Ok(Self::Bce),
            other => Err(GcrError::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMetric {
    /// NDCG at the configured cutoff.
    Ndcg,
    Auc,
}

impl FromStr for EvalMetric {
    type Err = GcrError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        if s == "auc" {
            Ok(Self::Auc)
        } else if s == "ndcg" || s.starts_with("ndcg@") {
            Ok(Self::Ndcg)
        } else {
            Err(GcrError::Config(format!("unknown eval metric {s:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub dropout: f64,
    pub epochs_max: usize,
    pub patience: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
    pub objective: Objective,
    pub eval_metric: EvalMetric,
    pub eval_k: usize,
    #[serde(default)]
    pub hop_cap: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 512,
            l2: 1e-5,
            dropout: 0.7,
            epochs_max: 100,
            patience: 10,
            negatives_per_positive: 1,
            seed: 0,
            objective: Objective::Bpr,
            eval_metric: EvalMetric::Ndcg,
            eval_k: 20,
            hop_cap: None,
        }
    }
}

impl TrainConfig {
    /// Learning rates searched by the lr grid loop.
    pub const LR_GRID: [f64; 5] = [0.01, 0.005, 0.001, 0.0005, 0.0001];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GcrError::Config(m.to_string()));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.l2 >= 0.0) {
            return bad("l2 must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.negatives_per_positive == 0 {
            return bad("negatives_per_positive must be at least 1");
        }
        if self.eval_k == 0 {
            return bad("eval k must be at least 1");
        }
        if self.hop_cap == Some(0) {
            return bad("hop cap must be positive");
        }
        Ok(())
    }

    pub fn hop_cap(&self) -> Option<HopCap> {
        self.hop_cap.map(|max_nodes| HopCap {
            max_nodes,
            seed: self.seed,
        })
    }
}

/// One optimisation batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Bpr(Vec<BprTriple>),
    Bce(Vec<(usize, usize, u8)>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Bpr(t) => t.len(),
            Batch::Bce(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Objective plus L2 term.
    pub total: f64,
    pub objective: f64,
    pub l2: f64,
    /// In [`RelevanceModel::params`] order.
    pub grads: Vec<DenseMatrix>,
}

/// Loss of one batch and its gradient wrt every trainable tensor. In train mode
/// the head's batch-norm statistics are committed to `model`.
pub fn batch_loss(
    model: &mut RelevanceModel,
    ctx: &Context,
    batch: &Batch,
    l2: f64,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(GcrError::Contract("empty batch".into()));
    }
    let (users, items, upstream_of): (Vec<usize>, Vec<usize>, Box<dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>>) =
        match batch {
            Batch::Bpr(triples) => {
                let n = triples.len();
                let users = triples.iter().map(|t| t.u).chain(triples.iter().map(|t| t.u)).collect();
                let items = triples.iter().map(|t| t.i).chain(triples.iter().map(|t| t.j)).collect();
                let f = move |s: &[f64]| {
                    let (loss, g) = bpr_loss_grad(&s[..n], &s[n..])?;
                    let up = g.iter().copied().chain(g.iter().map(|x| -x)).collect();
                    Ok((loss, up))
                };
                (users, items, Box::new(f))
            }
            Batch::Bce(rows) => {
                let labels: Vec<u8> = rows.iter().map(|r| r.2).collect();
                let f = move |s: &[f64]| bce_loss_grad(s, &labels);
                (rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect(), Box::new(f))
            }
        };
    let fwd = model.forward_pairs(ctx, &users, &items, mode, rng)?;
    let (objective, upstream) = upstream_of(&fwd.scores)?;
    let mut grads = model.backward_pairs(ctx, &fwd, &upstream)?;
    let l2_term = l2 * model.l2_norm_sq();
    if l2 > 0.0 {
        for ((_, value, role), g) in model.params().iter().zip(grads.iter_mut()) {
            if role.decays() {
                g.add_scaled(value, 2.0 * l2)?;
            }
        }
    }
    if mode == Mode::Train {
        model.commit(&fwd)?;
    }
    Ok(BatchLoss {
        total: objective + l2_term,
        objective,
        l2: l2_term,
        grads,
    })
}

/// Data for one training run. The graph must be built from `train` only.
pub struct TrainData<'a> {
    pub train: &'a InteractionSet,
    pub validation: &'a InteractionSet,
    pub graph: &'a BipartiteGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub l2: f64,
    pub metric: Option<f64>,
    pub seconds: f64,
    pub skipped_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub metric: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            writeln!(out, "{}", serde_json::to_string(e)?).expect("write to string");
        }
        Ok(out)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Validation pairs for AUC: labelled records as given, or every positive plus
/// one sampled non-interacted item when the split carries no negatives.
fn auc_pairs(data: &TrainData, seed: u64) -> Result<(Vec<(usize, usize)>, Vec<u8>)> {
    let records = data.validation.records();
    let mut pairs: Vec<(usize, usize)> = records.iter().map(|r| (r.user, r.item)).collect();
    let mut labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    if !labels.contains(&0) {
        let known = data.train.union(data.validation)?;
        let index = PositiveIndex::new(&known);
        let mut rng = rng::stream(seed, Stream::Eval);
        for r in records {
            if let Some(j) = index.sample_negative(r.user, &mut rng) {
                pairs.push((r.user, j));
                labels.push(0);
            }
        }
    }
    Ok((pairs, labels))
}

fn bce_examples(index: &PositiveIndex, train: &InteractionSet, negs: usize, rng: &mut Rng) -> (Vec<(usize, usize, u8)>, usize) {
    let mut rows: Vec<(usize, usize, u8)> = train.records().iter().map(|r| (r.user, r.item, r.label)).collect();
    let mut skipped = 0;
    if !rows.iter().any(|r| r.2 == 0) {
        for r in train.records() {
            for _ in 0..negs {
                match index.sample_negative(r.user, rng) {
                    Some(j) => rows.push((r.user, j, 0)),
                    None => skipped += 1,
                }
            }
        }
    }
    rows.shuffle(rng);
    (rows, skipped)
}

/// Validation score of the current model (higher is better).
pub fn validation_metric(
    model: &RelevanceModel,
    ctx: &Context,
    data: &TrainData,
    cfg: &TrainConfig,
    masks: &[Vec<usize>],
    auc_data: Option<&(Vec<(usize, usize)>, Vec<u8>)>,
) -> Result<Option<f64>> {
    let inf = Inference::new(model, ctx)?;
    match cfg.eval_metric {
        EvalMetric::Ndcg => {
            if data.validation.positives().next().is_none() {
                return Ok(None);
            }
            Ok(Some(evaluate(&inf, data.validation, masks, cfg.eval_k)?.ndcg_at_k))
        }
        EvalMetric::Auc => match auc_data {
            Some((pairs, labels)) if !pairs.is_empty() => Ok(Some(auc(&inf.score_pairs(pairs)?, labels)?)),
            _ => Ok(None),
        },
    }
}

/// Trains embeddings and scorer jointly with Adam, evaluates on validation after
/// every epoch and returns the best-epoch model.
pub fn train(mut model: RelevanceModel, data: &TrainData, cfg: &TrainConfig) -> Result<(RelevanceModel, TrainHistory)> {
    train_with(&mut model, data, cfg, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    model: &mut RelevanceModel,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(RelevanceModel, TrainHistory)> {
    cfg.validate()?;
    if data.graph.num_users() != data.train.num_users() || data.graph.num_items() != data.train.num_items() {
        return Err(GcrError::Shape("graph and training set disagree on node counts".into()));
    }
    model.set_dropout(cfg.dropout)?;
    let ctx = Context::new(model, data.graph, cfg.hop_cap())?;
    let index = PositiveIndex::new(data.train);
    if index.num_positives() == 0 {
        return Err(GcrError::NoInteractions);
    }
    let masks = masks_by_user(data.train);
    let auc_data = match cfg.eval_metric {
        EvalMetric::Auc => Some(auc_pairs(data, cfg.seed)?),
        EvalMetric::Ndcg => None,
    };
    let mut sampling = rng::stream(cfg.seed, Stream::Sampling);
    let mut dropout = rng::stream(cfg.seed, Stream::Dropout);
    let mut adam = AdamState::new(cfg.lr);

    let mut history = TrainHistory {
        metric: match cfg.eval_metric {
            EvalMetric::Ndcg => format!("ndcg@{}", cfg.eval_k),
            EvalMetric::Auc => "auc".into(),
        },
        epochs: Vec::new(),
        best_epoch: 0,
        best_metric: None,
    };
    let mut best = model.clone();
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs_max {
        let t0 = Instant::now();
        let (batches, skipped) = match cfg.objective {
            Objective::Bpr => {
                let n = index.num_positives() * cfg.negatives_per_positive;
                let s = sample_with_index(&index, n, &mut sampling);
                let b: Vec<Batch> = s.triples.chunks(cfg.batch_size).map(|c| Batch::Bpr(c.to_vec())).collect();
                (b, s.skipped)
            }
            Objective::Bce => {
                let (rows, skipped) = bce_examples(&index, data.train, cfg.negatives_per_positive, &mut sampling);
                (rows.chunks(cfg.batch_size).map(|c| Batch::Bce(c.to_vec())).collect(), skipped)
            }
        };
        if skipped > 0 {
            log::warn!("epoch {epoch}: skipped {skipped} samples from users with no negatives");
        }
        let (mut loss_sum, mut l2_sum, mut weight) = (0.0, 0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let out = batch_loss(model, &ctx, batch, cfg.l2, Mode::Train, Some(&mut dropout))?;
            if !out.total.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
                return Err(GcrError::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("loss {} (objective {}, l2 {})", out.total, out.objective, out.l2),
                });
            }
            model.update_params(|params| adam.step(params, &out.grads))?;
            loss_sum += out.objective * batch.len() as f64;
            l2_sum += out.l2 * batch.len() as f64;
            weight += batch.len();
        }
        if weight == 0 {
            return Err(GcrError::Contract("no trainable samples: every user has interacted with every item".into()));
        }
        let metric = validation_metric(model, &ctx, data, cfg, &masks, auc_data.as_ref())?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / weight as f64,
            l2: l2_sum / weight as f64,
            metric,
            seconds: t0.elapsed().as_secs_f64(),
            skipped_samples: skipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} {} {:?} ({:.2}s)",
            record.loss,
            history.metric,
            record.metric,
            record.seconds
        );
        on_epoch(&record);
        history.epochs.push(record);

        let improved = match (metric, history.best_metric) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            // without a validation signal the latest epoch is kept
            (None, _) => true,
        };
        if improved {
            history.best_epoch = epoch;
            history.best_metric = metric;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, history))
}

/// Tries every rate in `grid` and keeps the run with the best validation metric.
pub fn train_lr_grid(
    init: &RelevanceModel,
    data: &TrainData,
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<(RelevanceModel, TrainHistory, f64)> {
    let mut best: Option<(RelevanceModel, TrainHistory, f64)> = None;
    for &lr in grid {
        let run_cfg = TrainConfig { lr, ..*cfg };
        let (model, hist) = train(init.clone(), data, &run_cfg)?;
        let better = match &best {
            None => true,
            Some((_, h, _)) => hist.best_metric.unwrap_or(f64::NEG_INFINITY) > h.best_metric.unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best = Some((model, hist, lr));
        }
    }
    best.ok_or_else(|| GcrError::Config("empty learning-rate grid".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    #[serde(rename = "L")]
    pub depth: usize,
    pub d: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub head: Option<HeadConfig>,
    pub layer_weights: Option<SuperVectorModel>,
    pub best_epoch: Option<usize>,
    pub config: serde_json::Value,
}

/// Writes every tensor and batch-norm buffer plus a JSON manifest next to it.
pub fn save_checkpoint(path: &Path, model: &RelevanceModel, best_epoch: Option<usize>, config: serde_json::Value) -> Result<()> {
    let mut tensors: Vec<(String, DenseMatrix)> = model.params().into_iter().map(|(n, t, _)| (n, t)).collect();
    if let Some(head) = model.head() {
        for (n, t) in head.buffers() {
            tensors.push((format!("head.{n}"), t.clone()));
        }
    }
    let meta = CheckpointMeta {
        kind: model.kind,
        depth: model.depth,
        d: model.dim(),
        num_users: model.embeddings.num_users(),
        num_items: model.embeddings.num_items(),
        head: model.head().map(|h| *h.config()),
        layer_weights: match &model.scorer {
            Scorer::SuperVector(sv) => Some(sv.clone()),
            _ => None,
        },
        best_epoch,
        config,
    };
    save_tensors(path, &tensors, serde_json::to_value(&meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(RelevanceModel, CheckpointMeta)> {
    if !path.exists() {
        return Err(GcrError::MissingArtifact {
            path: path.display().to_string(),
            hint: "run `gcr train` first".into(),
        });
    }
    let manifest = load_manifest(path)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.meta)?;
    let tensors = load_tensors(path)?;
    let find = |name: &str| -> Result<DenseMatrix> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| GcrError::Format(format!("checkpoint lacks tensor {name}")))
    };
    let embeddings = EmbeddingTable::new(find("emb.users")?, find("emb.items")?)?;
    let scorer = match meta.kind {
        ModelKind::Dot => Scorer::Dot,
        ModelKind::Ngcf | ModelKind::LightGcn => Scorer::SuperVector(
            meta.layer_weights
                .clone()
                .ok_or_else(|| GcrError::Format("checkpoint lacks layer weights".into()))?,
        ),
        kind => {
            let cfg = meta.head.ok_or_else(|| GcrError::Format("checkpoint lacks head config".into()))?;
            let mut head = MlpHead::zeros(cfg)?;
            let names: Vec<String> = head.params().into_iter().map(|p| p.0).collect();
            for (p, n) in head.params_mut().into_iter().zip(&names) {
                let t = find(&format!("head.{n}"))?;
                t.expect_shape(p.shape())?;
                *p = t;
            }
            let names: Vec<String> = head.buffers().into_iter().map(|b| b.0).collect();
            for (b, n) in head.buffers_mut().into_iter().zip(&names) {
                let t = find(&format!("head.{n}"))?;
                t.expect_shape(b.shape())?;
                *b = t;
            }
            match kind.cross_mode() {
                Some(mode) => Scorer::Cross(CrossHead::with_head(mode, meta.depth, meta.d, head)?),
                None => Scorer::Mlp(head),
            }
        }
    };
    let mut model = RelevanceModel::from_parts(meta.kind, meta.depth, embeddings, scorer)?;
    if let Scorer::SuperVector(sv) = &mut model.scorer {
        if sv.trainable {
            let (u, i) = (find("layers.w_u")?, find("layers.w_i")?);
            sv.aggregation = crate::baselines::Aggregation::WeightedSum {
                w_u: u.into_vec(),
                w_i: i.into_vec(),
            };
        }
    }
    Ok((model, meta))
}

/// Positive records of a set, as a fresh labelled set.
pub fn positives_only(set: &InteractionSet) -> Result<InteractionSet> {
    let records: Vec<Interaction> = set.positives().copied().collect();
    InteractionSet::new(records, set.num_users(), set.num_items())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{split_interactions, SplitSpec};
    use crate::training::model::ModelSpec;
    use rand::Rng as _;

    fn planted(seed: u64) -> InteractionSet {
        // 3 blocks of 10 users x 10 items
        let mut rng = rng::stream(seed, Stream::Synth);
        let mut recs = Vec::new();
        for u in 0..30 {
            for i in 0..30 {
                let p = if u / 10 == i / 10 { 0.5 } else { 0.02 };
                if rng.random_bool(p) {
                    recs.push(Interaction::positive(u, i));
                }
            }
        }
        InteractionSet::new(recs, 30, 30).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            batch_size: 64,
            epochs_max: 6,
            patience: 100,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    fn spec(kind: ModelKind) -> ModelSpec {
        ModelSpec {
            dim: 8,
            init_std: 0.1,
            head: HeadConfig { hidden_units: 16, ..HeadConfig::with_input(1) },
            ..ModelSpec::new(kind)
        }
    }

    fn setup(seed: u64) -> (crate::graph::Splits, BipartiteGraph) {
        let data = planted(seed);
        let s = split_interactions(&data, &SplitSpec::new([0.65, 0.15, 0.2], seed).unwrap()).unwrap();
        let g = BipartiteGraph::build(&s.train);
        (s, g)
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (s, g) = setup(1);
        let mut rng = rng::stream(1, Stream::Init);
        let model = RelevanceModel::new(&spec(ModelKind::Ecc), 30, 30, &mut rng).unwrap();
        let data = TrainData { train: &s.train, validation: &s.validation, graph: &g };
        let (trained, hist) = train(model.clone(), &data, &TrainConfig { lr: 0.0, epochs_max: 2, ..quick_cfg() }).unwrap();
        let before: Vec<_> = model.params().into_iter().map(|p| p.1).collect();
        let after: Vec<_> = trained.params().into_iter().map(|p| p.1).collect();
        assert_eq!(before, after);
        assert!(hist.epochs.len() <= 2);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (s, g) = setup(2);
        let data = TrainData { train: &s.train, validation: &s.validation, graph: &g };
        let run = || {
            let mut rng = rng::stream(2, Stream::Init);
            let model = RelevanceModel::new(&spec(ModelKind::Ecc), 30, 30, &mut rng).unwrap();
            train(model, &data, &quick_cfg()).unwrap()
        };
        let (_, a) = run();
        let (_, b) = run();
        assert_eq!(a.losses(), b.losses());
        assert_eq!(a.epochs.iter().map(|e| e.metric).collect::<Vec<_>>(), b.epochs.iter().map(|e| e.metric).collect::<Vec<_>>());
        let l = a.losses();
        assert!(l.windows(2).all(|w| w[1] < w[0]), "{l:?}");
    }

    #[test]
    fn best_checkpoint_has_max_metric() {
        let (s, g) = setup(3);
        let data = TrainData { train: &s.train, validation: &s.validation, graph: &g };
        let mut rng = rng::stream(3, Stream::Init);
        let model = RelevanceModel::new(&spec(ModelKind::Hcc), 30, 30, &mut rng).unwrap();
        let cfg = TrainConfig { patience: 2, epochs_max: 12, ..quick_cfg() };
        let (best, hist) = train(model, &data, &cfg).unwrap();
        let max = hist.epochs.iter().filter_map(|e| e.metric).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(hist.best_metric, Some(max));
        let ctx = Context::new(&best, &g, None).unwrap();
        let again = validation_metric(&best, &ctx, &data, &cfg, &masks_by_user(&s.train), None).unwrap();
        assert_eq!(again, Some(max));
        assert!(hist.to_jsonl().unwrap().lines().count() == hist.epochs.len());
    }

    #[test]
    fn every_kind_trains_with_both_objectives() {
        let (s, g) = setup(4);
        let data = TrainData { train: &s.train, validation: &s.validation, graph: &g };
        for kind in ModelKind::ALL {
            for (objective, eval_metric) in [(Objective::Bpr, EvalMetric::Ndcg), (Objective::Bce, EvalMetric::Auc)] {
                let mut rng = rng::stream(4, Stream::Init);
                let model = RelevanceModel::new(&spec(kind), 30, 30, &mut rng).unwrap();
                let cfg = TrainConfig { epochs_max: 2, objective, eval_metric, ..quick_cfg() };
                let (_, hist) = train(model, &data, &cfg).unwrap();
                assert!(hist.best_metric.is_some(), "{kind:?} {objective:?}");
            }
        }
    }

    #[test]
    fn l2_gradient_and_value() {
        let (s, g) = setup(5);
        let mut rng = rng::stream(5, Stream::Init);
        let mut model = RelevanceModel::new(&spec(ModelKind::Ecc), 30, 30, &mut rng).unwrap();
        model.set_dropout(0.0).unwrap();
        let ctx = Context::new(&model, &g, None).unwrap();
        let sampled = sample_with_index(&PositiveIndex::new(&s.train), 16, &mut rng);
        let batch = Batch::Bpr(sampled.triples);
        let a = batch_loss(&mut model, &ctx, &batch, 0.0, Mode::Eval, None).unwrap();
        let b = batch_loss(&mut model, &ctx, &batch, 0.25, Mode::Eval, None).unwrap();
        assert!((b.l2 - 0.25 * model.l2_norm_sq()).abs() < 1e-12);
        assert!((b.total - a.total - b.l2).abs() < 1e-12);
        let users = &model.embeddings.users;
        let diff: Vec<f64> = b.grads[0].data().iter().zip(a.grads[0].data()).map(|(x, y)| x - y).collect();
        for (d, e) in diff.iter().zip(users.data()) {
            assert!((d - 0.5 * e).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (s, g) = setup(6);
        let data = TrainData { train: &s.train, validation: &s.validation, graph: &g };
        let dir = tempfile::tempdir().unwrap();
        for kind in ModelKind::ALL {
            let mut rng = rng::stream(6, Stream::Init);
            let mut sp = spec(kind);
            sp.train_layer_weights = true;
            let model = RelevanceModel::new(&sp, 30, 30, &mut rng).unwrap();
            let (model, hist) = train(model, &data, &TrainConfig { epochs_max: 1, ..quick_cfg() }).unwrap();
            let path = dir.path().join(format!("{}.bin", kind.as_str()));
            save_checkpoint(&path, &model, Some(hist.best_epoch), serde_json::json!({"seed": 6})).unwrap();
            let (loaded, meta) = load_checkpoint(&path).unwrap();
            assert_eq!(meta.kind, kind);
            assert_eq!(loaded.params().into_iter().map(|p| p.1).collect::<Vec<_>>(), model.params().into_iter().map(|p| p.1).collect::<Vec<_>>());
            let ctx = Context::new(&model, &g, None).unwrap();
            let (a, b) = (Inference::new(&model, &ctx).unwrap(), Inference::new(&loaded, &ctx).unwrap());
            use crate::eval::UserScorer;
            assert_eq!(a.score_user(3).unwrap(), b.score_user(3).unwrap());
        }
        assert!(matches!(load_checkpoint(&dir.path().join("nope.bin")), Err(GcrError::MissingArtifact { .. })));
    }
}
