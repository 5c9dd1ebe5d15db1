use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use crate::data::dataset::{build_dataset, Dataset, SECONDS_PER_DAY};
use crate::data::events::{parse_events, parse_social, write_events, write_social, EventRecord};
use crate::data::sim::HawkesSimConfig;
use crate::data::social::SocialGraph;
use crate::error::{Error, Result};
use crate::model::config::parse;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::socialgraph::{build_metapath_neighbors, load_index, save_index, MetaPathIndex};
use crate::training::TrainConfig;

use super::evaluate::Target;

/// Environment variable naming the cache directory.
pub const CACHE_ENV: &str = "SOCIALTPP_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".socialtpp-cache";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Event log; defaults to `events.tsv` in the cache directory.
    pub events: Option<PathBuf>,
    /// Friendship list; defaults to `social.tsv` in the cache directory.
    pub social: Option<PathBuf>,
    pub min_user_events: usize,
    pub min_item_events: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { events: None, social: None, min_user_events: 5, min_item_events: 5, cache_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub target: Target,
    pub checkpoint: PathBuf,
    /// Raw user id to explain.
    pub user: Option<u64>,
    /// Position inside the explained sequence; the last event when unset.
    pub position: Option<usize>,
    /// Output file for reports and exports; stdout when unset.
    pub out: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 20],
            target: Target::Test,
            checkpoint: PathBuf::from("model.ckpt"),
            user: None,
            position: None,
            out: None,
        }
    }
}

/// Every setting a command can read, keyed `section.name`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub sim: HawkesSimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

fn path_opt(v: &Option<PathBuf>) -> String {
    v.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.trim().is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn sim_entries(s: &HawkesSimConfig) -> Vec<(&'static str, String)> {
    vec![
        ("sim.num_users", s.num_users.to_string()),
        ("sim.num_items", s.num_items.to_string()),
        ("sim.base_rate", s.base_rate.to_string()),
        ("sim.self_alpha", s.self_alpha.to_string()),
        ("sim.mutual_alpha", s.mutual_alpha.to_string()),
        ("sim.decay", s.decay.to_string()),
        ("sim.horizon", s.horizon.to_string()),
        ("sim.social_edge_prob", s.social_edge_prob.to_string()),
        ("sim.social_copy_prob", s.social_copy_prob.to_string()),
        ("sim.preference_size", s.preference_size.to_string()),
        ("sim.seed", s.seed.to_string()),
    ]
}

impl RunConfig {
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let e = &self.eval;
        let mut out = vec![
            ("data.events", path_opt(&d.events)),
            ("data.social", path_opt(&d.social)),
            ("data.min_user_events", d.min_user_events.to_string()),
            ("data.min_item_events", d.min_item_events.to_string()),
            ("data.cache_dir", path_opt(&d.cache_dir)),
        ];
        out.extend(sim_entries(&self.sim));
        out.extend(self.model.entries());
        out.extend(self.train.entries());
        out.extend([
            ("eval.ks", e.ks.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
            ("eval.target", e.target.name().to_string()),
            ("eval.checkpoint", e.checkpoint.display().to_string()),
            ("eval.user", opt(&e.user)),
            ("eval.position", opt(&e.position)),
            ("eval.out", path_opt(&e.out)),
        ]);
        out
    }

    pub fn is_key(&self, key: &str) -> bool {
        self.entries().iter().any(|(k, _)| *k == key)
    }

    /// Applies one setting. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if !self.is_key(key) {
            return Ok(false);
        }
        let s = &mut self.sim;
        match key {
            "data.events" => self.data.events = parse_path(value),
            "data.social" => self.data.social = parse_path(value),
            "data.min_user_events" => self.data.min_user_events = parse(key, value)?,
            "data.min_item_events" => self.data.min_item_events = parse(key, value)?,
            "data.cache_dir" => self.data.cache_dir = parse_path(value),
            "sim.num_users" => s.num_users = parse(key, value)?,
            "sim.num_items" => s.num_items = parse(key, value)?,
            "sim.base_rate" => s.base_rate = parse(key, value)?,
            "sim.self_alpha" => s.self_alpha = parse(key, value)?,
            "sim.mutual_alpha" => s.mutual_alpha = parse(key, value)?,
            "sim.decay" => s.decay = parse(key, value)?,
            "sim.horizon" => s.horizon = parse(key, value)?,
            "sim.social_edge_prob" => s.social_edge_prob = parse(key, value)?,
            "sim.social_copy_prob" => s.social_copy_prob = parse(key, value)?,
            "sim.preference_size" => s.preference_size = parse(key, value)?,
            "sim.seed" => s.seed = parse(key, value)?,
            "eval.ks" => {
                self.eval.ks =
                    value.split(',').filter(|v| !v.trim().is_empty()).map(|v| parse(key, v)).collect::<Result<_>>()?
            }
            "eval.target" => {
                self.eval.target = match value.trim() {
                    "validation" => Target::Validation,
                    "test" => Target::Test,
                    other => return Err(Error::config(key, format!("expected `validation` or `test`, got `{other}`"))),
                }
            }
            "eval.checkpoint" => self.eval.checkpoint = PathBuf::from(value.trim()),
            "eval.user" => self.eval.user = parse_opt(key, value)?,
            "eval.position" => self.eval.position = parse_opt(key, value)?,
            "eval.out" => self.eval.out = parse_path(value),
            k if k.starts_with("model.") => return self.model.set(k, value),
            k => return self.train.set(k, value),
        }
        Ok(true)
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            if !self.set(k.trim(), v.trim())? {
                return Err(Error::config(k.trim(), "unknown key"));
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.min_user_events == 0 {
            return Err(Error::config("data.min_user_events", "must be >= 1"));
        }
        if self.data.min_item_events == 0 {
            return Err(Error::config("data.min_item_events", "must be >= 1"));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::config("eval.ks", "needs one or more cut-offs >= 1"));
        }
        self.sim.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// `data.cache_dir`, else the environment variable, else a local default.
    pub fn cache_dir(&self) -> PathBuf {
        self.data
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
    }

    pub fn events_path(&self) -> PathBuf {
        self.data.events.clone().unwrap_or_else(|| self.cache_dir().join("events.tsv"))
    }

    pub fn social_path(&self) -> PathBuf {
        self.data.social.clone().unwrap_or_else(|| self.cache_dir().join("social.tsv"))
    }
}

/// Reads the event log and friendship list, filters and splits them.
pub fn load_data(config: &RunConfig) -> Result<(Dataset, SocialGraph)> {
    let events = config.events_path();
    let parsed = parse_events(&events)?;
    if parsed.malformed > 0 {
        log::warn!("{}: skipped {} malformed lines", events.display(), parsed.malformed);
    }
    let dataset = build_dataset(&parsed.records, config.data.min_user_events, config.data.min_item_events)?;
    let edges = parse_social(&config.social_path())?;
    let graph = SocialGraph::from_dataset(&dataset, &edges);
    Ok((dataset, graph))
}

fn fingerprint(dataset: &Dataset, graph: &SocialGraph) -> u64 {
    let mut h = DefaultHasher::new();
    dataset.num_users.hash(&mut h);
    dataset.num_items.hash(&mut h);
    for seq in &dataset.sequences {
        for e in seq {
            e.item.hash(&mut h);
        }
        usize::MAX.hash(&mut h);
    }
    graph.edges().hash(&mut h);
    h.finish()
}

/// Location of the cached meta-path index for this data and model config.
pub fn index_cache_path(config: &RunConfig, model: &ModelConfig, dataset: &Dataset, graph: &SocialGraph) -> PathBuf {
    config.cache_dir().join(format!(
        "metapath-{:016x}-o{}-c{}-s{}.txt",
        fingerprint(dataset, graph),
        model.max_order,
        model.neighbour_cap,
        model.seed
    ))
}

/// Loads the meta-path index from the cache, building and storing it on a miss.
pub fn cached_index(
    config: &RunConfig,
    model: &ModelConfig,
    dataset: &Dataset,
    graph: &SocialGraph,
) -> Result<MetaPathIndex> {
    let path = index_cache_path(config, model, dataset, graph);
    if path.exists() {
        match load_index(&path) {
            Ok(index) if index.num_items == dataset.num_items && index.orders() == model.max_order => return Ok(index),
            Ok(_) => log::warn!("{}: stale cache entry, rebuilding", path.display()),
            Err(e) => log::warn!("{e}; rebuilding"),
        }
    }
    let index = build_metapath_neighbors(graph, dataset.num_items, model.max_order, model.neighbour_cap, model.seed)?;
    let dir = config.cache_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_index(&index, &path)?;
    Ok(index)
}

/// Builds a model around `params`, reusing the cached meta-path index.
pub fn model_with_params(
    config: &RunConfig,
    model: &ModelConfig,
    params: ModelParams,
    dataset: &Dataset,
    graph: &SocialGraph,
) -> Result<Model> {
    model.validate()?;
    if params.num_users() != dataset.num_users || params.num_items() != dataset.num_items {
        return Err(Error::Invalid(format!(
            "checkpoint covers {} users / {} items but the data has {} / {}",
            params.num_users(),
            params.num_items(),
            dataset.num_users,
            dataset.num_items
        )));
    }
    let index = cached_index(config, model, dataset, graph)?;
    Ok(Model::new(model.clone(), params, graph, &index, dataset.interval_clip))
}

/// Raw-id records of a filtered dataset.
pub fn dataset_records(dataset: &Dataset) -> Vec<EventRecord> {
    let mut out = Vec::with_capacity(dataset.num_events());
    for (u, seq) in dataset.sequences.iter().enumerate() {
        for e in seq {
            out.push(EventRecord {
                user_id: dataset.user_ids[u],
                item_id: dataset.item_ids[e.item],
                timestamp: dataset.time_origin + e.time * SECONDS_PER_DAY,
            });
        }
    }
    out
}

/// Writes the filtered dataset and its friendships, both with raw ids.
pub fn write_prepared(dir: &Path, dataset: &Dataset, graph: &SocialGraph) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let events = dir.join("prepared-events.tsv");
    let social = dir.join("prepared-social.tsv");
    write_events(&events, &dataset_records(dataset), Some("filtered event log"))?;
    let edges: Vec<(u64, u64)> =
        graph.edges().into_iter().map(|(a, b)| (dataset.user_ids[a], dataset.user_ids[b])).collect();
    write_social(&social, &edges, Some("friendships among kept users"))?;
    Ok((events, social))
}
