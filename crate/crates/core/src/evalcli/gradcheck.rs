use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::{build_dataset, Dataset, SECONDS_PER_DAY};
use crate::data::events::EventRecord;
use crate::data::social::{sample_friends, SocialGraph};
use crate::diffmath::relative_error;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::training::{batch_loss, make_instance, Instance};

use super::experiment::build_model;

/// Largest relative error over one module's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCheck {
    pub module: String,
    pub max_error: f64,
    pub probes: usize,
}

impl ModuleCheck {
    pub fn to_line(&self) -> String {
        format!("{:<8} max_rel_error={:.3e} probes={}", self.module, self.max_error, self.probes)
    }
}

/// Four users, six items, eight events each, on a small friendship graph.
/// Each user touches at most four items so negatives always exist.
pub fn toy_instance() -> Result<(Dataset, SocialGraph)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut events = Vec::new();
    for u in 0..4u64 {
        let mut t = 0.0;
        for _ in 0..8 {
            t += rng.random_range(0.3..2.5);
            let item = (u + rng.random_range(0..4)) % 6;
            events.push(EventRecord { user_id: u, item_id: item, timestamp: t * SECONDS_PER_DAY });
        }
    }
    let dataset = build_dataset(&events, 1, 1)?;
    let graph = SocialGraph::from_dataset(&dataset, &[(0, 1), (1, 2), (2, 3), (0, 2)]);
    Ok((dataset, graph))
}

/// Toy model with parameters moved away from their tiny initial values so
/// every term of the loss is exercised.
pub fn toy_model(dataset: &Dataset, graph: &SocialGraph, config: &ModelConfig) -> Result<Model> {
    let mut model = build_model(dataset, graph, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    for (_, t) in model.params.named_mut() {
        for v in t.values_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    Ok(model)
}

pub fn toy_batch(dataset: &Dataset, graph: &SocialGraph, model: &Model) -> Result<Vec<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut out = Vec::new();
    for u in 0..dataset.num_users {
        let friends = sample_friends(graph, u, model.config.friends, 0);
        if let Some(i) = make_instance(dataset, &friends, u, model, 1, &mut rng)? {
            out.push(i);
        }
    }
    Ok(out)
}

fn module_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Central differences of the joint loss against backward, for every entry of
/// every parameter, grouped by module.
pub fn gradcheck_suite(config: &ModelConfig, gamma: f64, eps: f64) -> Result<Vec<ModuleCheck>> {
    let (dataset, graph) = toy_instance()?;
    let mut model = toy_model(&dataset, &graph, config)?;
    let batch = toy_batch(&dataset, &graph, &model)?;

    model.params.zero_grad();
    batch_loss(&model, &batch, gamma, false, None)?.backward_into(&mut model.params)?;
    let analytic: Vec<Vec<f64>> = model.params.named().iter().map(|(_, t)| t.grad().to_vec()).collect();
    let names: Vec<&'static str> = model.params.named().iter().map(|(n, _)| *n).collect();

    let mut worst: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (p, name) in names.iter().enumerate() {
        let n = analytic[p].len();
        let entry = worst.entry(module_of(name).to_string()).or_insert((0.0, 0));
        for j in 0..n {
            let orig = model.params.named()[p].1.values()[j];
            let mut at = |x: f64| -> Result<f64> {
                model.params.named_mut()[p].1.values_mut()[j] = x;
                Ok(batch_loss(&model, &batch, gamma, false, None)?.value())
            };
            let numeric = (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps);
            at(orig)?;
            entry.0 = entry.0.max(relative_error(analytic[p][j], numeric));
            entry.1 += 1;
        }
    }
    Ok(worst.into_iter().map(|(module, (max_error, probes))| ModuleCheck { module, max_error, probes }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_instance_shape() {
        let (ds, g) = toy_instance().unwrap();
        assert_eq!((ds.num_users, ds.num_events()), (4, 32));
        assert!(ds.num_items <= 6);
        assert_eq!(g.degree(0), 2);
    }

    #[test]
    fn suite_covers_every_module() {
        let config = ModelConfig { d: 3, window: 3, ..Default::default() };
        let checks = gradcheck_suite(&config, 0.01, 1e-4).unwrap();
        let names: Vec<&str> = checks.iter().map(|c| c.module.as_str()).collect();
        assert_eq!(names, ["embed", "fusion", "general", "graph", "mutual", "self"]);
        for c in &checks {
            assert!(c.max_error <= 1e-4, "{}", c.to_line());
        }
    }
}
