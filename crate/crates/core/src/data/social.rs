use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;

/// User–user friendship plus the user–item interaction bipartite structure.
#[derive(Clone, Debug, PartialEq)]
pub struct SocialGraph {
    /// Sorted, symmetric, no self-loops.
    pub user_adjacency: Vec<Vec<usize>>,
    /// Items each user interacted with in the training portion of the sequence.
    pub user_items: Vec<BTreeSet<usize>>,
}

impl SocialGraph {
    /// Builds the graph over dense user ids. Edges are symmetrized; self-loops
    /// and out-of-range endpoints are dropped.
    pub fn from_dense_edges(num_users: usize, edges: &[(usize, usize)], user_items: Vec<BTreeSet<usize>>) -> Self {
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_users];
        for &(a, b) in edges {
            if a == b || a >= num_users || b >= num_users {
                continue;
            }
            adj[a].insert(b);
            adj[b].insert(a);
        }
        Self { user_adjacency: adj.into_iter().map(|s| s.into_iter().collect()).collect(), user_items }
    }

    /// Maps raw-id edges through the dataset's index; edges touching filtered
    /// users are ignored.
    pub fn from_dataset(dataset: &Dataset, raw_edges: &[(u64, u64)]) -> Self {
        let index = dataset.user_index();
        let dense: Vec<(usize, usize)> =
            raw_edges.iter().filter_map(|(a, b)| Some((*index.get(a)?, *index.get(b)?))).collect();
        let user_items =
            (0..dataset.num_users).map(|u| dataset.train_events(u).iter().map(|e| e.item).collect()).collect();
        Self::from_dense_edges(dataset.num_users, &dense, user_items)
    }

    pub fn num_users(&self) -> usize {
        self.user_adjacency.len()
    }

    pub fn friends(&self, user: usize) -> &[usize] {
        &self.user_adjacency[user]
    }

    pub fn degree(&self, user: usize) -> usize {
        self.user_adjacency[user].len()
    }

    pub fn max_degree(&self) -> usize {
        self.user_adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Dense-id edge list with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, nbrs) in self.user_adjacency.iter().enumerate() {
            out.extend(nbrs.iter().filter(|&&b| a < b).map(|&b| (a, b)));
        }
        out
    }
}

/// Derives a per-user stream from a run seed.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Up to `m` friends of `user`: all of them (sorted) when the degree is at
/// most `m`, otherwise a uniform sample without replacement fixed by `seed`.
pub fn sample_friends(graph: &SocialGraph, user: usize, m: usize, seed: u64) -> Vec<usize> {
    let friends = graph.friends(user);
    if friends.len() <= m {
        return friends.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, user as u64));
    let mut picked: Vec<usize> = index::sample(&mut rng, friends.len(), m).into_iter().map(|i| friends[i]).collect();
    picked.sort_unstable();
    picked
}
