use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position of a held-out item among the candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResult {
    pub user: usize,
    pub ground_truth: usize,
    /// 1-based.
    pub rank: usize,
    pub candidate_count: usize,
}

/// Ranks `ground_truth` among every item not in `exclude`.
///
/// Items scoring strictly higher come first; equal scores are ordered by
/// ascending item id.
pub fn rank_ground_truth(
    user: usize,
    scores: &[f64],
    ground_truth: usize,
    exclude: &BTreeSet<usize>,
) -> Result<RankingResult> {
    if ground_truth >= scores.len() {
        return Err(Error::Invalid(format!("ground truth {ground_truth} outside {} items", scores.len())));
    }
    if exclude.contains(&ground_truth) {
        return Err(Error::Invalid(format!("user {user}: ground truth {ground_truth} is in the exclude set")));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("user {user}: score of item {i} is NaN")));
    }
    let g = scores[ground_truth];
    let mut ahead = 0;
    let mut candidates = 0;
    for (i, &s) in scores.iter().enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        candidates += 1;
        if s > g || (s == g && i < ground_truth) {
            ahead += 1;
        }
    }
    Ok(RankingResult { user, ground_truth, rank: ahead + 1, candidate_count: candidates })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

pub fn metrics_at_k(results: &[RankingResult], k: usize) -> Result<MetricValues> {
    if k == 0 {
        return Err(Error::config("eval.k", "must be >= 1"));
    }
    if results.is_empty() {
        return Err(Error::Invalid("metrics: no ranking results".into()));
    }
    let (mut recall, mut ndcg, mut mrr) = (0.0, 0.0, 0.0);
    for r in results.iter().filter(|r| r.rank <= k) {
        recall += 1.0;
        ndcg += 1.0 / ((1 + r.rank) as f64).log2();
        mrr += 1.0 / r.rank as f64;
    }
    let n = results.len() as f64;
    Ok(MetricValues { recall: recall / n, ndcg: ndcg / n, mrr: mrr / n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<usize, MetricValues>,
    pub users: usize,
    pub config: BTreeMap<String, String>,
    /// Seconds since the Unix epoch; left out by the library so reports compare exactly.
    pub timestamp: Option<u64>,
}

impl MetricsReport {
    pub fn new(results: &[RankingResult], ks: &[usize], config: BTreeMap<String, String>) -> Result<Self> {
        let mut metrics = BTreeMap::new();
        for &k in ks {
            metrics.insert(k, metrics_at_k(results, k)?);
        }
        Ok(Self { metrics, users: results.len(), config, timestamp: None })
    }

    pub fn get(&self, k: usize) -> Option<MetricValues> {
        self.metrics.get(&k).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("metrics report: {e}")))
    }

    /// One `{"metric", "k", "value"}` object per line.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for (&k, m) in &self.metrics {
            for (name, value) in [("recall", m.recall), ("ndcg", m.ndcg), ("mrr", m.mrr)] {
                let line = serde_json::json!({ "metric": name, "k": k, "value": value });
                let _ = writeln!(s, "{line}");
            }
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>6} {:>9} {:>9} {:>9}\n", "k", "Recall", "NDCG", "MRR");
        for (&k, m) in &self.metrics {
            let _ = writeln!(s, "{k:>6} {:>9.4} {:>9.4} {:>9.4}", m.recall, m.ndcg, m.mrr);
        }
        let _ = writeln!(s, "users: {}", self.users);
        s
    }
}
