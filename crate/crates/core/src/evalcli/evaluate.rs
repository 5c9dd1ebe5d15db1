use std::collections::{BTreeMap, BTreeSet};

use crate::data::dataset::Dataset;
use crate::data::social::{sample_friends, SocialGraph};
use crate::diffmath::Tape;
use crate::error::Result;
use crate::model::{item_logits, prepare_input, Model, UserInput};

use super::metrics::{rank_ground_truth, MetricsReport, RankingResult};

/// Users scored per tape.
const SCORE_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Penultimate event, predicted from the training events.
    Validation,
    /// Last event, predicted from training events plus the validation event.
    Test,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Validation => "validation",
            Target::Test => "test",
        }
    }
}

/// Model input and held-out item for every user.
pub fn evaluation_inputs(
    model: &Model,
    dataset: &Dataset,
    graph: &SocialGraph,
    target: Target,
) -> Vec<(UserInput, usize)> {
    (0..dataset.num_users)
        .map(|u| {
            let (upto, gt) = match target {
                Target::Validation => (dataset.train_len(u), dataset.validation_target(u).item),
                Target::Test => (dataset.train_len(u) + 1, dataset.test_target(u).item),
            };
            let friends = sample_friends(graph, u, model.config.friends, model.config.seed);
            (prepare_input(dataset, &friends, u, upto, &model.config), gt)
        })
        .collect()
}

/// Items of the input events, minus the item being predicted.
fn exclude_set(items: &[usize], ground_truth: usize) -> BTreeSet<usize> {
    items.iter().copied().filter(|&i| i != ground_truth).collect()
}

pub fn rank_users(model: &Model, dataset: &Dataset, graph: &SocialGraph, target: Target) -> Result<Vec<RankingResult>> {
    let cases = evaluation_inputs(model, dataset, graph, target);
    let mut out = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(SCORE_CHUNK) {
        let inputs: Vec<UserInput> = chunk.iter().map(|(i, _)| i.clone()).collect();
        let scores = model.score_users(&inputs)?;
        for ((input, gt), s) in chunk.iter().zip(&scores) {
            out.push(rank_ground_truth(input.user, s, *gt, &exclude_set(&input.items, *gt))?);
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    graph: &SocialGraph,
    target: Target,
    ks: &[usize],
) -> Result<MetricsReport> {
    let results = rank_users(model, dataset, graph, target)?;
    let mut config: BTreeMap<String, String> =
        model.config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    config.insert("eval.target".into(), target.name().into());
    MetricsReport::new(&results, ks, config)
}

/// Ranks every next-item target inside the training sequences.
pub fn rank_training(model: &Model, dataset: &Dataset, graph: &SocialGraph) -> Result<Vec<RankingResult>> {
    let mut out = Vec::new();
    let users: Vec<usize> = (0..dataset.num_users).filter(|&u| dataset.train_len(u) >= 2).collect();
    for chunk in users.chunks(SCORE_CHUNK) {
        let mut tape = Tape::new();
        let vars = model.record(&mut tape);
        let g = model.embed(&mut tape, &vars)?;
        for &u in chunk {
            let friends = sample_friends(graph, u, model.config.friends, model.config.seed);
            let input = prepare_input(dataset, &friends, u, dataset.train_len(u), &model.config);
            let cuts: Vec<usize> = (0..input.len() - 1).collect();
            let enc = model.encode(&mut tape, &vars, &g, &input, &cuts, None)?;
            let logits = item_logits(&mut tape, enc.hybrid, vars.item)?;
            let n = dataset.num_items;
            let vals = tape.value(logits);
            for &c in &cuts {
                let gt = input.items[c + 1];
                let ex = exclude_set(&input.items[..=c], gt);
                out.push(rank_ground_truth(u, &vals[c * n..(c + 1) * n], gt, &ex)?);
            }
        }
    }
    Ok(out)
}
