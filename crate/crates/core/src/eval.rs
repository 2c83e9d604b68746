//! All-ranking evaluation: every item a user did not train on is ranked, and the
//! top `k` are scored against the held-out items.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GcrError, Result};
use crate::graph::InteractionSet;

/// Anything that can score every item for a user.
pub trait UserScorer: Sync {
    fn num_items(&self) -> usize;

    fn score_user(&self, user: usize) -> Result<Vec<f64>>;

    /// Seconds spent preparing hop representations before scoring, if any.
    fn prep_seconds(&self) -> f64 {
        0.0
    }
}

/// Fixed score table (`users x items`), handy for oracles and tests.
pub struct FixedScores(pub Vec<Vec<f64>>);

impl UserScorer for FixedScores {
    fn num_items(&self) -> usize {
        self.0.first().map_or(0, Vec::len)
    }

    fn score_user(&self, user: usize) -> Result<Vec<f64>> {
        self.0
            .get(user)
            .cloned()
            .ok_or_else(|| GcrError::Index(format!("user {user} has no scores")))
    }
}

/// Descending score, ties broken by ascending item id. NaN sorts last.
fn by_score(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        let (x, y) = (scores[a], scores[b]);
        match y.partial_cmp(&x) {
            Some(Ordering::Equal) | None => {
                x.is_nan().cmp(&y.is_nan()).then(a.cmp(&b))
            }
            Some(o) => o,
        }
    }
}

/// Items not in `mask` ordered best first.
pub fn rank_scores(scores: &[f64], mask: &[usize]) -> Vec<usize> {
    let mut masked = vec![false; scores.len()];
    for &m in mask {
        if m < masked.len() {
            masked[m] = true;
        }
    }
    let mut items: Vec<usize> = (0..scores.len()).filter(|&i| !masked[i]).collect();
    items.sort_unstable_by(by_score(scores));
    items
}

/// The first `k` of [`rank_scores`], found by partial selection.
pub fn top_k(scores: &[f64], mask: &[usize], k: usize) -> Vec<usize> {
    let mut masked = vec![false; scores.len()];
    for &m in mask {
        if m < masked.len() {
            masked[m] = true;
        }
    }
    let mut items: Vec<usize> = (0..scores.len()).filter(|&i| !masked[i]).collect();
    let cmp = by_score(scores);
    if k < items.len() {
        items.select_nth_unstable_by(k, &cmp);
        items.truncate(k);
    }
    items.sort_unstable_by(cmp);
    items
}

pub fn rank_items<S: UserScorer + ?Sized>(scorer: &S, user: usize, mask: &[usize]) -> Result<Vec<usize>> {
    Ok(rank_scores(&scorer.score_user(user)?, mask))
}

/// Precision, recall and NDCG at `k` with binary gains and `1/log2(rank+1)` discounts.
pub fn topk_metrics(ranked: &[usize], relevant: &[usize], k: usize) -> Result<(f64, f64, f64)> {
    if k == 0 {
        return Err(GcrError::Config("cutoff k must be at least 1".into()));
    }
    if relevant.is_empty() {
        return Err(GcrError::UndefinedMetric("user has no relevant items".into()));
    }
    let mut rel = relevant.to_vec();
    rel.sort_unstable();
    rel.dedup();
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (r, item) in ranked.iter().take(k).enumerate() {
        if rel.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..rel.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok((hits as f64 / k as f64, hits as f64 / rel.len() as f64, dcg / idcg))
}

/// Probability that a random positive outscores a random negative, ties counted
/// half, from average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GcrError::Numeric("NaN score in AUC input".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(GcrError::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("not NaN"));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based: start+1..=end) share their mean
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mean_rank * tied_pos as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Relative improvement in percent of `(auc - 0.5)` over a base model.
pub fn relaimpr(auc_model: f64, auc_base: f64) -> Result<f64> {
    if !(auc_base > 0.5) || auc_base > 1.0 {
        return Err(GcrError::UndefinedMetric(format!(
            "base AUC {auc_base} must lie in (0.5, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&auc_model) {
        return Err(GcrError::UndefinedMetric(format!("model AUC {auc_model} outside [0, 1]")));
    }
    Ok(((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub num_relevant: usize,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub representation_s: f64,
    pub scoring_s: f64,
    pub sorting_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relaimpr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relaimpr_base: Option<String>,
    pub num_users_evaluated: usize,
    pub num_users_skipped: usize,
    pub timing: Timing,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(skip)]
    pub per_user: Vec<UserMetrics>,
}

impl MetricReport {
    pub const TSV_HEADER: &'static str =
        "k\tprecision\trecall\tndcg\tauc\trelaimpr\tusers\tskipped\ttotal_s";

    pub fn tsv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\t{:.3}",
            self.k,
            self.precision_at_k,
            self.recall_at_k,
            self.ndcg_at_k,
            opt(self.auc),
            opt(self.relaimpr),
            self.num_users_evaluated,
            self.num_users_skipped,
            self.timing.total_s
        )
    }

    pub fn per_user_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.per_user {
            writeln!(out, "{}", serde_json::to_string(m)?).expect("write to string");
        }
        Ok(out)
    }

    /// AUC and RelaImpr against a named base AUC.
    pub fn with_auc(mut self, auc: f64, base: Option<(&str, f64)>) -> Result<Self> {
        self.auc = Some(auc);
        if let Some((name, base_auc)) = base {
            self.relaimpr = Some(relaimpr(auc, base_auc)?);
            self.relaimpr_base = Some(name.to_string());
        }
        Ok(self)
    }
}

/// Per-user training items, indexed by user.
pub fn masks_by_user(train: &InteractionSet) -> Vec<Vec<usize>> {
    train.positive_items_by_user()
}

/// Ranks every non-masked item for each user with held-out positives and
/// averages the per-user metrics. Users whose test set is empty are skipped.
pub fn evaluate<S: UserScorer + ?Sized>(
    scorer: &S,
    test: &InteractionSet,
    train_mask: &[Vec<usize>],
    k: usize,
) -> Result<MetricReport> {
    if k == 0 {
        return Err(GcrError::Config("cutoff k must be at least 1".into()));
    }
    let start = Instant::now();
    let relevant = test.positive_items_by_user();
    let users: Vec<usize> = (0..relevant.len()).filter(|&u| !relevant[u].is_empty()).collect();
    if users.is_empty() {
        return Err(GcrError::NoInteractions);
    }
    if test.num_items() > scorer.num_items() {
        return Err(shape_err(format!(
            "test set has {} items, scorer covers {}",
            test.num_items(),
            scorer.num_items()
        )));
    }
    let empty = Vec::new();
    let rows = users
        .par_iter()
        .map(|&u| -> Result<(UserMetrics, f64, f64)> {
            let t0 = Instant::now();
            let scores = scorer.score_user(u)?;
            let t1 = Instant::now();
            let mask = train_mask.get(u).unwrap_or(&empty);
            let ranked = top_k(&scores, mask, k);
            let (precision, recall, ndcg) = topk_metrics(&ranked, &relevant[u], k)?;
            let t2 = Instant::now();
            let m = UserMetrics {
                user: u,
                num_relevant: relevant[u].len(),
                precision,
                recall,
                ndcg,
            };
            Ok((m, (t1 - t0).as_secs_f64(), (t2 - t1).as_secs_f64()))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = rows.len() as f64;
    let mut report = MetricReport {
        k,
        precision_at_k: rows.iter().map(|r| r.0.precision).sum::<f64>() / n,
        recall_at_k: rows.iter().map(|r| r.0.recall).sum::<f64>() / n,
        ndcg_at_k: rows.iter().map(|r| r.0.ndcg).sum::<f64>() / n,
        auc: None,
        relaimpr: None,
        relaimpr_base: None,
        num_users_evaluated: rows.len(),
        num_users_skipped: relevant.len() - rows.len(),
        timing: Timing {
            representation_s: scorer.prep_seconds(),
            scoring_s: rows.iter().map(|r| r.1).sum(),
            sorting_s: rows.iter().map(|r| r.2).sum(),
            total_s: 0.0,
        },
        config: None,
        per_user: rows.into_iter().map(|r| r.0).collect(),
    };
    report.timing.total_s = start.elapsed().as_secs_f64() + report.timing.representation_s;
    Ok(report)
}

/// Sample mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Interaction;

    #[test]
    fn ranking_by_index_score() {
        let scores: Vec<f64> = (0..6).map(|i| i as f64).collect();
        assert_eq!(rank_scores(&scores, &[]), vec![5, 4, 3, 2, 1, 0]);
        assert_eq!(rank_scores(&scores, &[4, 1]), vec![5, 3, 2, 0]);
        assert_eq!(top_k(&scores, &[4, 1], 2), vec![5, 3]);
    }

    #[test]
    fn ties_break_by_item_id() {
        let scores = [1.0, 2.0, 1.0, 2.0, f64::NAN];
        assert_eq!(rank_scores(&scores, &[]), vec![1, 3, 0, 2, 4]);
        assert_eq!(top_k(&scores, &[], 3), vec![1, 3, 0]);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_metrics(&[3, 4, 5], &[0, 1], 3).unwrap(), (0.0, 0.0, 0.0));
        let (p, r, n) = topk_metrics(&[7, 8, 9], &[7, 9], 2).unwrap();
        assert_eq!((p, r), (0.5, 0.5));
        let want = 1.0 / (1.0 + 1.0 / 3f64.log2());
        assert!((n - want).abs() < 1e-12);
        assert!((want - 0.6131).abs() < 1e-4);
        let (p, _, n) = topk_metrics(&[1, 2], &[1, 2, 3], 2).unwrap();
        assert_eq!((p, n), (1.0, 1.0));
        assert!(matches!(topk_metrics(&[1], &[], 1), Err(GcrError::UndefinedMetric(_))));
        assert!(topk_metrics(&[1], &[1], 0).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.5, 0.5], &[0, 1, 0]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(GcrError::UndefinedMetric(_))));
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn relaimpr_examples() {
        assert_eq!(relaimpr(0.8106, 0.8106).unwrap(), 0.0);
        assert!((relaimpr(0.8681, 0.8106).unwrap() - 18.51).abs() < 0.01);
        assert!((relaimpr(0.8218, 0.8106).unwrap() - 3.61).abs() < 0.01);
        assert!(relaimpr(0.7, 0.5).is_err());
    }

    fn set(pairs: &[(usize, usize)], nu: usize, ni: usize) -> InteractionSet {
        InteractionSet::new(pairs.iter().map(|&(u, i)| Interaction::positive(u, i)).collect(), nu, ni).unwrap()
    }

    #[test]
    fn oracle_scores_give_perfect_recall() {
        let test = set(&[(0, 1), (0, 3), (1, 0)], 3, 5);
        let mut table = vec![vec![0.0; 5]; 3];
        table[0][1] = f64::INFINITY;
        table[0][3] = f64::INFINITY;
        table[1][0] = f64::INFINITY;
        let r = evaluate(&FixedScores(table), &test, &[vec![], vec![], vec![]], 3).unwrap();
        assert_eq!(r.recall_at_k, 1.0);
        assert_eq!(r.ndcg_at_k, 1.0);
        assert!((r.precision_at_k - (2.0 / 3.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(r.num_users_evaluated, 2);
        assert_eq!(r.num_users_skipped, 1);
    }

    #[test]
    fn masked_scores_do_not_matter_and_means_aggregate() {
        let test = set(&[(0, 1), (1, 2), (1, 4)], 2, 6);
        let mask = vec![vec![0, 5], vec![3]];
        let base = vec![vec![0.3, 0.1, 0.7, 0.2, 0.9, 0.4], vec![0.6, 0.5, 0.1, 0.8, 0.2, 0.3]];
        let mut perturbed = base.clone();
        perturbed[0][0] = 100.0;
        perturbed[1][3] = -100.0;
        let a = evaluate(&FixedScores(base), &test, &mask, 2).unwrap();
        let b = evaluate(&FixedScores(perturbed), &test, &mask, 2).unwrap();
        assert_eq!(a.per_user, b.per_user);
        let mean = a.per_user.iter().map(|m| m.ndcg).sum::<f64>() / 2.0;
        assert_eq!(a.ndcg_at_k, mean);
        assert!(a.per_user_jsonl().unwrap().lines().count() == 2);
        assert_eq!(a.tsv_line().split('\t').count(), MetricReport::TSV_HEADER.split('\t').count());
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let test = InteractionSet::empty(2, 2);
        assert!(evaluate(&FixedScores(vec![vec![0.0; 2]; 2]), &test, &[], 5).is_err());
    }

    #[test]
    fn mean_std_of_samples() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
