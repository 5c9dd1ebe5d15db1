use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::dataset::{build_dataset, Dataset};
use crate::data::sim::{simulate_hawkes, HawkesSimConfig};
use crate::data::social::SocialGraph;
use crate::error::{Error, Result};
use crate::model::{Ablation, Model, ModelConfig, ModelParams};
use crate::socialgraph::build_metapath_neighbors;
use crate::training::{train, TrainConfig, TrainOutcome};

use super::evaluate::{evaluate, Target};
use super::metrics::MetricsReport;

/// Simulates a dataset and its social graph, keeping every user with at least
/// three events.
pub fn simulated_dataset(config: &HawkesSimConfig) -> Result<(Dataset, SocialGraph)> {
    let sim = simulate_hawkes(config)?;
    let dataset = build_dataset(&sim.records(), 1, 1)?;
    let graph = SocialGraph::from_dataset(&dataset, &sim.raw_edges());
    Ok((dataset, graph))
}

/// Freshly initialised model for `dataset`.
pub fn build_model(dataset: &Dataset, graph: &SocialGraph, config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let index =
        build_metapath_neighbors(graph, dataset.num_items, config.max_order, config.neighbour_cap, config.seed)?;
    let params = ModelParams::init(config, dataset.num_users, dataset.num_items);
    Ok(Model::new(config.clone(), params, graph, &index, dataset.interval_clip))
}

/// Trains a fresh model and reports held-out test metrics.
pub fn train_and_test(
    dataset: &Dataset,
    graph: &SocialGraph,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    ks: &[usize],
) -> Result<(Model, TrainOutcome, MetricsReport)> {
    let mut model = build_model(dataset, graph, model_config)?;
    let outcome = train(&mut model, dataset, graph, train_config, |_| {})?;
    let report = evaluate(&model, dataset, graph, Target::Test, ks)?;
    Ok((model, outcome, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub recall: f64,
    pub ndcg: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>10} {:>10}\n", "Variant", "R@10", "N@10");
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4}", r.label, r.recall, r.ndcg);
        }
        s
    }

    /// One JSON object per variant and metric.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            for (metric, value) in [("recall", r.recall), ("ndcg", r.ndcg)] {
                let line = serde_json::json!({ "variant": r.variant, "metric": metric, "k": 10, "value": value });
                let _ = writeln!(s, "{line}");
            }
        }
        s
    }
}

/// Trains and tests each variant with the same seeds and budget.
pub fn run_ablation_suite(
    dataset: &Dataset,
    graph: &SocialGraph,
    base: &ModelConfig,
    train_config: &TrainConfig,
    variants: &[&str],
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for &name in variants {
        let ablation = Ablation::variant(name)?;
        let config = ModelConfig { ablation, ..base.clone() };
        let (_, outcome, report) = train_and_test(dataset, graph, &config, train_config, &[10])?;
        let m = report.get(10).expect("k = 10 requested");
        log::info!("variant {name}: recall@10 {:.4} ndcg@10 {:.4}", m.recall, m.ndcg);
        rows.push(AblationRow {
            variant: name.to_string(),
            label: ablation.label().to_string(),
            recall: m.recall,
            ndcg: m.ndcg,
            epochs: outcome.history.len(),
        });
    }
    Ok(AblationReport { rows })
}

/// Two-sided paired t-test; returns `(t, p)`. Identical samples give `p = 1`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid(format!(
            "paired t-test needs two equal samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok((t, 2.0 * (1.0 - dist.cdf(t.abs()))))
}
