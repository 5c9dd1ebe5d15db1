use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::social::{mix_seed, SocialGraph};
use crate::error::{Error, Result};

const CACHE_MAGIC: &str = "socialtpp-metapath";
const CACHE_VERSION: u32 = 1;

/// Per-order item neighbour lists, `neighbours[k - 1][item]`, sorted and capped.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPathIndex {
    pub num_items: usize,
    pub cap: usize,
    pub seed: u64,
    pub neighbours: Vec<Vec<Vec<usize>>>,
}

impl MetaPathIndex {
    pub fn orders(&self) -> usize {
        self.neighbours.len()
    }

    /// Neighbours of `item` at order `k` (1-based).
    pub fn get(&self, k: usize, item: usize) -> &[usize] {
        &self.neighbours[k - 1][item]
    }
}

/// Items reachable from each item through `{i, u_1, …, u_k, j}` chains, uncapped.
///
/// `u_1` interacted with `i`, consecutive users are friends, `u_k` interacted
/// with `j`; walks may revisit users. `i` itself is never included.
pub fn uncapped_neighbours(graph: &SocialGraph, num_items: usize, max_order: usize) -> Vec<Vec<BTreeSet<usize>>> {
    let mut interactors: Vec<Vec<usize>> = vec![Vec::new(); num_items];
    for (u, items) in graph.user_items.iter().enumerate() {
        for &i in items {
            if i < num_items {
                interactors[i].push(u);
            }
        }
    }
    let mut out = vec![vec![BTreeSet::new(); num_items]; max_order];
    for item in 0..num_items {
        let mut frontier: BTreeSet<usize> = interactors[item].iter().copied().collect();
        for order in 0..max_order {
            if order > 0 {
                frontier = frontier.iter().flat_map(|&u| graph.friends(u).iter().copied()).collect();
            }
            let set = &mut out[order][item];
            for &u in &frontier {
                set.extend(graph.user_items[u].iter().copied().filter(|&j| j != item && j < num_items));
            }
        }
    }
    out
}

pub fn build_metapath_neighbors(
    graph: &SocialGraph,
    num_items: usize,
    max_order: usize,
    cap: usize,
    seed: u64,
) -> Result<MetaPathIndex> {
    if max_order == 0 {
        return Err(Error::config("model.max_order", "must be >= 1"));
    }
    if cap == 0 {
        return Err(Error::config("model.neighbour_cap", "must be >= 1"));
    }
    let full = uncapped_neighbours(graph, num_items, max_order);
    let neighbours = full
        .into_iter()
        .enumerate()
        .map(|(order, lists)| {
            lists
                .into_iter()
                .enumerate()
                .map(|(item, set)| {
                    let all: Vec<usize> = set.into_iter().collect();
                    if all.len() <= cap {
                        return all;
                    }
                    let salt = (order * num_items + item) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, salt));
                    let mut picked: Vec<usize> =
                        index::sample(&mut rng, all.len(), cap).into_iter().map(|i| all[i]).collect();
                    picked.sort_unstable();
                    picked
                })
                .collect()
        })
        .collect();
    Ok(MetaPathIndex { num_items, cap, seed, neighbours })
}

/// Plain-text cache:
///
/// ```text
/// socialtpp-metapath 1
/// orders <l> items <n> cap <P> seed <s>
/// <order>\t<item>\t<neighbour> <neighbour> ...
/// ```
///
/// One line per (order, item); orders are 1-based.
pub fn format_index(index: &MetaPathIndex) -> String {
    let mut s = format!("{CACHE_MAGIC} {CACHE_VERSION}\n");
    let _ = writeln!(s, "orders {} items {} cap {} seed {}", index.orders(), index.num_items, index.cap, index.seed);
    for (k, lists) in index.neighbours.iter().enumerate() {
        for (item, nb) in lists.iter().enumerate() {
            let _ = write!(s, "{}\t{}\t", k + 1, item);
            for (n, j) in nb.iter().enumerate() {
                if n > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{j}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn parse_index(text: &str, path: &Path) -> Result<MetaPathIndex> {
    let bad = |line: usize, msg: &str| Error::Format { path: path.to_path_buf(), line, msg: msg.to_string() };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| bad(1, "empty cache file"))?;
    let version = first
        .strip_prefix(CACHE_MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| bad(1, "not a metapath cache"))?;
    if version != CACHE_VERSION {
        return Err(bad(1, &format!("unsupported cache version {version}")));
    }
    let (_, second) = lines.next().ok_or_else(|| bad(2, "missing header"))?;
    let f: Vec<&str> = second.split_whitespace().collect();
    let num =
        |i: usize| -> Result<u64> { f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(2, "malformed header")) };
    if f.len() != 8 || f[0] != "orders" || f[2] != "items" || f[4] != "cap" || f[6] != "seed" {
        return Err(bad(2, "malformed header"));
    }
    let (orders, num_items, cap, seed) = (num(1)? as usize, num(3)? as usize, num(5)? as usize, num(7)?);
    let mut neighbours = vec![vec![Vec::new(); num_items]; orders];
    let mut seen = 0usize;
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let k: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(lineno, "bad order"))?;
        let item: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(lineno, "bad item"))?;
        if k == 0 || k > orders || item >= num_items {
            return Err(bad(lineno, "order or item out of range"));
        }
        let nb = parts
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|v| v.parse::<usize>().ok().filter(|&j| j < num_items))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad(lineno, "bad neighbour id"))?;
        neighbours[k - 1][item] = nb;
        seen += 1;
    }
    if seen != orders * num_items {
        return Err(bad(0, &format!("expected {} lists, found {seen}", orders * num_items)));
    }
    Ok(MetaPathIndex { num_items, cap, seed, neighbours })
}

pub fn save_index(index: &MetaPathIndex, path: &Path) -> Result<()> {
    fs::write(path, format_index(index)).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<MetaPathIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_index(&text, path)
}
