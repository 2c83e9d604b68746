//! Command implementations behind the `gcr` binary.
//!
//! Every command returns a JSON value (or a report that serialises to one); the
//! binary decides where to print it. A dataset bundle is the directory written
//! by [`ingest`]: `train.tsv`, `validation.tsv`, `test.tsv`, `users.tsv`,
//! `items.tsv` and `stats.json`.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::baselines::gnn_propagate;
use crate::cca::{degrees_of_freedom, export_cca_weights, DofMode, WeightReport};
use crate::config::RunConfig;
use crate::error::{GcrError, Result};
use crate::eval::{auc, evaluate as evaluate_report, masks_by_user, MetricReport};
use crate::graph::{
    format_interactions, load_interactions, parse_with_ids, split_interactions, BipartiteGraph, IdMap,
    InteractionSet, LoadedInteractions, Splits,
};
use crate::pgr::{precompute_pgr, PgrTable, GNN_MAGIC, PGR_MAGIC};
use crate::rng::{self, Stream};
use crate::synth::{generate, SynthSpec};
use crate::training::{
    load_checkpoint, save_checkpoint, train as train_model, train_lr_grid, Context, Inference,
    ModelKind, RelevanceModel, Representation, Scorer, TrainConfig, TrainData,
};

const SPLIT_FILES: [&str; 3] = ["train.tsv", "validation.tsv", "test.tsv"];

fn missing(path: &Path, hint: &str) -> GcrError {
    GcrError::MissingArtifact {
        path: path.display().to_string(),
        hint: hint.into(),
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(path, hint))
    }
}

fn dataset_stats(set: &InteractionSet) -> Value {
    let (nu, ni) = (set.num_users(), set.num_items());
    let cells = (nu * ni).max(1) as f64;
    json!({
        "users": nu,
        "items": ni,
        "interactions": set.len(),
        "positives": set.positives().count(),
        "density": set.len() as f64 / cells,
    })
}

/// Splits `input` and writes a dataset bundle into `out_dir`.
pub fn ingest(cfg: &RunConfig, input: &Path, out_dir: &Path) -> Result<Value> {
    require(input, "input interaction file not found")?;
    let loaded = load_interactions(input, cfg.format()?)?;
    if loaded.interactions.is_empty() {
        return Err(GcrError::NoInteractions);
    }
    let splits = split_interactions(&loaded.interactions, &cfg.split_spec()?)?;
    write_bundle(cfg, &loaded, &splits, out_dir)
}

fn write_bundle(cfg: &RunConfig, loaded: &LoadedInteractions, splits: &Splits, out_dir: &Path) -> Result<Value> {
    fs::create_dir_all(out_dir)?;
    for (name, set) in SPLIT_FILES.iter().zip([&splits.train, &splits.validation, &splits.test]) {
        fs::write(out_dir.join(name), format_interactions(set, &loaded.ids))?;
    }
    fs::write(out_dir.join("users.tsv"), loaded.ids.users_tsv())?;
    fs::write(out_dir.join("items.tsv"), loaded.ids.items_tsv())?;
    let mut stats = dataset_stats(&loaded.interactions);
    stats["splits"] = json!({
        "train": splits.train.len(),
        "validation": splits.validation.len(),
        "test": splits.test.len(),
    });
    stats["format"] = json!(cfg.format);
    stats["config"] = cfg.echo();
    fs::write(out_dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    Ok(stats)
}

/// Writes a planted block dataset as `user<TAB>item<TAB>label` lines.
pub fn synth(spec: &SynthSpec, out: &Path) -> Result<Value> {
    let data = generate(spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, format_interactions(&data.interactions, &data.ids))?;
    let (expected_in, expected_out) = spec.expected_edges();
    let mut stats = dataset_stats(&data.interactions);
    stats["spec"] = serde_json::to_value(spec)?;
    stats["expected_in_block"] = json!(expected_in);
    stats["expected_out_of_block"] = json!(expected_out);
    stats["path"] = json!(out.display().to_string());
    Ok(stats)
}

/// A dataset bundle read back from disk.
pub struct Bundle {
    pub ids: IdMap,
    pub splits: Splits,
}

impl Bundle {
    pub fn graph(&self) -> BipartiteGraph {
        BipartiteGraph::build(&self.splits.train)
    }

    /// Training plus validation positives, the items hidden at test time.
    pub fn test_mask(&self) -> Result<Vec<Vec<usize>>> {
        Ok(masks_by_user(&self.splits.train.union(&self.splits.validation)?))
    }
}

pub fn load_bundle(cfg: &RunConfig) -> Result<Bundle> {
    let dir = &cfg.paths.data;
    let hint = "run `gcr ingest` first";
    for name in ["users.tsv", "items.tsv"].iter().chain(&SPLIT_FILES) {
        require(&dir.join(name), hint)?;
    }
    let users = IdMap::parse_tsv(&fs::read_to_string(dir.join("users.tsv"))?)?;
    let items = IdMap::parse_tsv(&fs::read_to_string(dir.join("items.tsv"))?)?;
    let ids = IdMap::from_names(users, items)?;
    let format = cfg.format()?;
    let read = |name: &str| -> Result<InteractionSet> { parse_with_ids(&fs::read_to_string(dir.join(name))?, format, &ids) };
    let splits = Splits {
        train: read(SPLIT_FILES[0])?,
        validation: read(SPLIT_FILES[1])?,
        test: read(SPLIT_FILES[2])?,
    };
    Ok(Bundle { ids, splits })
}

/// Trains a model on a bundle and writes the checkpoint and epoch history.
pub fn train(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let bundle = load_bundle(cfg)?;
    let graph = bundle.graph();
    let train_cfg = cfg.train_config();
    let (model, history, lr) = fit(cfg, &bundle, &graph, &train_cfg)?;
    let ckpt = &cfg.paths.checkpoint;
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_checkpoint(ckpt, &model, Some(history.best_epoch), cfg.echo())?;
    let history_path = cfg.history_path();
    fs::write(&history_path, history.to_jsonl()?)?;
    Ok(json!({
        "model": model.kind.as_str(),
        "lr": lr,
        "epochs_run": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "metric": history.metric,
        "best_metric": history.best_metric,
        "checkpoint": ckpt.display().to_string(),
        "history": history_path.display().to_string(),
        "config": cfg.echo(),
    }))
}

fn fit(
    cfg: &RunConfig,
    bundle: &Bundle,
    graph: &BipartiteGraph,
    train_cfg: &TrainConfig,
) -> Result<(RelevanceModel, crate::training::TrainHistory, f64)> {
    let mut init_rng = rng::stream(cfg.seed, Stream::Init);
    let model = RelevanceModel::new(&cfg.model, graph.num_users(), graph.num_items(), &mut init_rng)?;
    let data = TrainData {
        train: &bundle.splits.train,
        validation: &bundle.splits.validation,
        graph,
    };
    if cfg.lr_grid {
        train_lr_grid(&model, &data, train_cfg, &TrainConfig::LR_GRID)
    } else {
        let (m, h) = train_model(model, &data, train_cfg)?;
        Ok((m, h, train_cfg.lr))
    }
}

fn load_trained(cfg: &RunConfig) -> Result<RelevanceModel> {
    Ok(load_checkpoint(&cfg.paths.checkpoint)?.0)
}

fn cache_magic(repr: Representation) -> Result<&'static [u8; 4]> {
    match repr {
        Representation::Pgr => Ok(PGR_MAGIC),
        Representation::Gnn => Ok(GNN_MAGIC),
        Representation::Raw => Err(GcrError::Config(
            "raw-embedding models have no hop cache to precompute".into(),
        )),
    }
}

/// Hop readouts of a trained model over the training graph.
pub fn hop_table(model: &RelevanceModel, graph: &BipartiteGraph) -> Result<PgrTable> {
    match model.representation() {
        Representation::Pgr => precompute_pgr(graph, &model.embeddings, model.depth),
        Representation::Gnn => gnn_propagate(graph, &model.embeddings, model.depth),
        Representation::Raw => Err(GcrError::Config("raw-embedding models have no hop readouts".into())),
    }
}

/// Writes the hop readouts of the trained model to `paths.cache`.
pub fn precompute(cfg: &RunConfig) -> Result<Value> {
    let model = load_trained(cfg)?;
    let magic = cache_magic(model.representation())?;
    let bundle = load_bundle(cfg)?;
    let table = hop_table(&model, &bundle.graph())?;
    let bytes = table.encode(magic);
    fs::write(&cfg.paths.cache, &bytes)?;
    Ok(json!({
        "cache": cfg.paths.cache.display().to_string(),
        "format": String::from_utf8_lossy(magic),
        "L": table.depth(),
        "d": table.dim(),
        "users": table.users().rows(),
        "items": table.items().rows(),
        "bytes": bytes.len(),
        "config": cfg.echo(),
    }))
}

fn load_cache(model: &RelevanceModel, path: &Path) -> Result<Option<PgrTable>> {
    if model.representation() == Representation::Raw || !path.exists() {
        return Ok(None);
    }
    let magic = cache_magic(model.representation())?;
    Ok(Some(PgrTable::decode(&fs::read(path)?, magic)?))
}

/// All-ranking evaluation on the test split; labeled data also gets AUC.
pub fn evaluate(cfg: &RunConfig) -> Result<MetricReport> {
    let model = load_trained(cfg)?;
    let bundle = load_bundle(cfg)?;
    let graph = bundle.graph();
    let cache = load_cache(&model, &cfg.paths.cache)?;
    let ctx;
    let inf = match &cache {
        Some(table) => Inference::from_cache(&model, table)?,
        None => {
            ctx = Context::new(&model, &graph, None)?;
            Inference::new(&model, &ctx)?
        }
    };
    let test = &bundle.splits.test;
    let mut report = evaluate_report(&inf, test, &bundle.test_mask()?, cfg.k)?;
    if test.records().iter().any(|r| r.label == 0) {
        let pairs: Vec<(usize, usize)> = test.records().iter().map(|r| (r.user, r.item)).collect();
        let labels: Vec<u8> = test.records().iter().map(|r| r.label).collect();
        let a = auc(&inf.score_pairs(&pairs)?, &labels)?;
        report = report.with_auc(a, cfg.base_auc.map(|b| (cfg.base_name.as_str(), b)))?;
    }
    report.config = Some(cfg.echo());
    if let Some(path) = &cfg.paths.per_user {
        fs::write(path, report.per_user_jsonl()?)?;
    }
    Ok(report)
}

/// Per-term weights of a trained linear cross head.
pub fn export_weights(cfg: &RunConfig) -> Result<WeightReport> {
    let model = load_trained(cfg)?;
    match &model.scorer {
        Scorer::Cross(cross) => export_cca_weights(cross),
        _ => Err(GcrError::Contract(format!(
            "{} has no cross-correlation head to export",
            model.kind.as_str()
        ))),
    }
}

fn dof_mode(kind: ModelKind, linear: bool) -> Result<DofMode> {
    Ok(match (kind, linear) {
        (ModelKind::Ngcf, _) => DofMode::Ngcf,
        (ModelKind::LightGcn, _) => DofMode::LightGcn,
        (ModelKind::Hcc | ModelKind::GnnHcc, false) => DofMode::Hcc,
        (ModelKind::Hcc | ModelKind::GnnHcc, true) => DofMode::HccLinear,
        (ModelKind::Ecc | ModelKind::GnnEcc, false) => DofMode::Ecc,
        (ModelKind::Ecc | ModelKind::GnnEcc, true) => DofMode::EccLinear,
        (other, _) => {
            return Err(GcrError::Config(format!(
                "degrees of freedom are defined for ngcf, lightgcn, hcc and ecc, not {}",
                other.as_str()
            )))
        }
    })
}

/// Aggregation degrees of freedom for the configured model, or for `mode` if given.
pub fn dof(cfg: &RunConfig, mode: Option<DofMode>) -> Result<Value> {
    let m = &cfg.model;
    let mode = match mode {
        Some(mode) => mode,
        None => dof_mode(m.kind, m.head.hidden_layers == 0)?,
    };
    let count = degrees_of_freedom(mode, m.depth, m.dim, m.head.hidden_units, m.head.hidden_layers)?;
    Ok(json!({
        "mode": format!("{mode:?}").to_lowercase(),
        "L": m.depth,
        "d": m.dim,
        "H_n": m.head.hidden_units,
        "H_l": m.head.hidden_layers,
        "dof": count,
    }))
}
