//! Synthetic multivariate Hawkes data with social item copying.
//!
//! Each user `u` has intensity
//! `μ0 + a_s·Σ_{own past} e^{−β0Δt} + a_m·Σ_{friends' past} e^{−β0Δt}` (times in days).
//! Events are drawn by Ogata thinning. Every accepted event is attributed to one
//! intensity component in proportion to its share; an event attributed to a
//! friend copies that friend's latest item with probability `social_copy_prob`,
//! otherwise the item comes from the user's own preference distribution.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use super::dataset::SECONDS_PER_DAY;
use super::events::EventRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HawkesSimConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// μ0, events per day.
    pub base_rate: f64,
    pub self_alpha: f64,
    pub mutual_alpha: f64,
    /// β0, per day.
    pub decay: f64,
    /// T, days.
    pub horizon: f64,
    pub social_edge_prob: f64,
    /// Chance that a friend-excited event repeats the item of the friend event
    /// whose kernel fired.
    pub social_copy_prob: f64,
    /// Items in each user's preference support.
    pub preference_size: usize,
    pub seed: u64,
}

impl Default for HawkesSimConfig {
    fn default() -> Self {
        Self {
            num_users: 100,
            num_items: 200,
            base_rate: 0.2,
            self_alpha: 0.1,
            mutual_alpha: 0.05,
            decay: 1.0,
            horizon: 100.0,
            social_edge_prob: 0.05,
            social_copy_prob: 0.9,
            preference_size: 10,
            seed: 0,
        }
    }
}

impl HawkesSimConfig {
    /// Checks the parameter ranges; stability needs the graph and is checked separately.
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, f: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(f, format!("must be > 0, got {v}")))
            }
        };
        let nonneg = |v: f64, f: &str| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(f, format!("must be >= 0, got {v}")))
            }
        };
        let prob = |v: f64, f: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(f, format!("must lie in [0, 1], got {v}")))
            }
        };
        pos(self.base_rate, "sim.base_rate")?;
        pos(self.decay, "sim.decay")?;
        pos(self.horizon, "sim.horizon")?;
        nonneg(self.self_alpha, "sim.self_alpha")?;
        nonneg(self.mutual_alpha, "sim.mutual_alpha")?;
        prob(self.social_edge_prob, "sim.social_edge_prob")?;
        prob(self.social_copy_prob, "sim.social_copy_prob")?;
        if self.num_users == 0 {
            return Err(Error::config("sim.num_users", "must be >= 1"));
        }
        if self.num_items == 0 {
            return Err(Error::config("sim.num_items", "must be >= 1"));
        }
        if self.preference_size == 0 {
            return Err(Error::config("sim.preference_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Spectral-radius bound `(a_s + a_m·max_degree)/β0`; must stay below 1.
    pub fn branching_bound(&self, max_degree: usize) -> f64 {
        (self.self_alpha + self.mutual_alpha * max_degree as f64) / self.decay
    }

    pub fn header(&self) -> String {
        let mut s = String::from("socialtpp synthetic hawkes data\n");
        let _ = writeln!(s, "sim.num_users = {}", self.num_users);
        let _ = writeln!(s, "sim.num_items = {}", self.num_items);
        let _ = writeln!(s, "sim.base_rate = {}", self.base_rate);
        let _ = writeln!(s, "sim.self_alpha = {}", self.self_alpha);
        let _ = writeln!(s, "sim.mutual_alpha = {}", self.mutual_alpha);
        let _ = writeln!(s, "sim.decay = {}", self.decay);
        let _ = writeln!(s, "sim.horizon = {}", self.horizon);
        let _ = writeln!(s, "sim.social_edge_prob = {}", self.social_edge_prob);
        let _ = writeln!(s, "sim.social_copy_prob = {}", self.social_copy_prob);
        let _ = writeln!(s, "sim.preference_size = {}", self.preference_size);
        let _ = write!(s, "sim.seed = {}", self.seed);
        s
    }
}

/// Which intensity component produced an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cause {
    Base,
    SelfExcited,
    Friend(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimEvent {
    pub user: usize,
    pub item: usize,
    /// Days.
    pub time: f64,
    pub cause: Cause,
    /// Whether the item was copied from the exciting friend.
    pub copied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub config: HawkesSimConfig,
    /// Time-ordered.
    pub events: Vec<SimEvent>,
    /// Undirected edges with `a < b`.
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Vec<Vec<usize>>,
}

impl SimOutput {
    /// Event-log records with timestamps in seconds.
    pub fn records(&self) -> Vec<EventRecord> {
        self.events
            .iter()
            .map(|e| EventRecord {
                user_id: e.user as u64,
                item_id: e.item as u64,
                timestamp: e.time * SECONDS_PER_DAY,
            })
            .collect()
    }

    pub fn raw_edges(&self) -> Vec<(u64, u64)> {
        self.edges.iter().map(|&(a, b)| (a as u64, b as u64)).collect()
    }

    pub fn user_times(&self, user: usize) -> Vec<f64> {
        self.events.iter().filter(|e| e.user == user).map(|e| e.time).collect()
    }

    pub fn count_per_user(&self) -> Vec<usize> {
        let mut c = vec![0; self.config.num_users];
        for e in &self.events {
            c[e.user] += 1;
        }
        c
    }

    /// The exact conditional intensity of one user, reconstructed from the output.
    pub fn intensity(&self, user: usize) -> UserIntensity {
        let cfg = &self.config;
        let friends = &self.adjacency[user];
        let kernels = self
            .events
            .iter()
            .filter_map(|e| {
                if e.user == user {
                    Some((e.time, cfg.self_alpha))
                } else if friends.binary_search(&e.user).is_ok() {
                    Some((e.time, cfg.mutual_alpha))
                } else {
                    None
                }
            })
            .filter(|&(_, a)| a > 0.0)
            .collect();
        UserIntensity { base: cfg.base_rate, decay: cfg.decay, kernels }
    }

    /// Compensator increments `Λ(t_i) − Λ(t_{i−1})` over every user's events,
    /// starting from time 0. Under a correct simulator these are i.i.d. Exp(1).
    pub fn time_rescaled_intervals(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.events.len());
        for u in 0..self.config.num_users {
            let lam = self.intensity(u);
            let mut prev = 0.0;
            for t in self.user_times(u) {
                out.push(lam.integral(prev, t));
                prev = t;
            }
        }
        out
    }
}

/// `λ(t) = base + Σ_{t_k < t} α_k e^{−β(t − t_k)}`.
#[derive(Clone, Debug, PartialEq)]
pub struct UserIntensity {
    pub base: f64,
    pub decay: f64,
    /// (time, α) pairs, time-ordered.
    pub kernels: Vec<(f64, f64)>,
}

impl UserIntensity {
    /// Left limit at `t`: events at exactly `t` are not yet counted.
    pub fn at(&self, t: f64) -> f64 {
        self.base
            + self
                .kernels
                .iter()
                .take_while(|&&(tk, _)| tk < t)
                .map(|&(tk, a)| a * (-self.decay * (t - tk)).exp())
                .sum::<f64>()
    }

    /// `∫_a^b λ(s) ds` in closed form.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let mut total = self.base * (b - a);
        for &(tk, alpha) in &self.kernels {
            if tk >= b {
                break;
            }
            let from = tk.max(a);
            total += alpha / self.decay * ((-self.decay * (from - tk)).exp() - (-self.decay * (b - tk)).exp());
        }
        total
    }
}

/// Erdős–Rényi friendship graph.
fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                edges.push((a, b));
            }
        }
    }
    edges
}

/// Simulates on a random graph drawn with `social_edge_prob`.
pub fn simulate_hawkes(config: &HawkesSimConfig) -> Result<SimOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let edges = random_graph(&mut rng, config.num_users, config.social_edge_prob);
    run(config, edges, &mut rng)
}

/// Simulates on a caller-supplied graph (dense ids); `social_edge_prob` is ignored.
pub fn simulate_hawkes_on_graph(config: &HawkesSimConfig, edges: &[(usize, usize)]) -> Result<SimOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run(config, edges.to_vec(), &mut rng)
}

fn run(config: &HawkesSimConfig, raw_edges: Vec<(usize, usize)>, rng: &mut ChaCha8Rng) -> Result<SimOutput> {
    let n = config.num_users;
    let mut adjacency = vec![Vec::new(); n];
    for &(a, b) in &raw_edges {
        if a == b || a >= n || b >= n {
            continue;
        }
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    for nb in &mut adjacency {
        nb.sort_unstable();
        nb.dedup();
    }
    let max_degree = adjacency.iter().map(Vec::len).max().unwrap_or(0);
    let bound = config.branching_bound(max_degree);
    if bound >= 1.0 {
        return Err(Error::config(
            "sim.mutual_alpha",
            format!(
                "unstable: (self_alpha + mutual_alpha·max_degree)/decay = {bound:.4} >= 1 (max_degree {max_degree})"
            ),
        ));
    }
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (a, nb) in adjacency.iter().enumerate() {
        edges.extend(nb.iter().filter(|&&b| a < b).map(|&b| (a, b)));
    }

    let pref_size = config.preference_size.min(config.num_items);
    let preferences: Vec<(Vec<usize>, WeightedIndex<f64>)> = (0..n)
        .map(|_| {
            let items = index::sample(rng, config.num_items, pref_size).into_vec();
            let w: Vec<f64> = (0..pref_size).map(|_| rng.sample::<f64, _>(Exp1) + 1e-12).collect();
            (items, WeightedIndex::new(w).expect("positive weights"))
        })
        .collect();

    let (mu, a_s, a_m, beta) = (config.base_rate, config.self_alpha, config.mutual_alpha, config.decay);
    // excite[u] = Σ_{own past} e^{−β(t − t_k)}, kept current at `t`.
    let mut excite = vec![0.0f64; n];
    let mut history: Vec<Vec<(f64, usize)>> = vec![Vec::new(); n];
    let mut lambda = vec![0.0f64; n];
    let intensities = |excite: &[f64], lambda: &mut [f64]| -> f64 {
        let mut total = 0.0;
        for u in 0..n {
            let social: f64 = adjacency[u].iter().map(|&j| excite[j]).sum();
            lambda[u] = mu + a_s * excite[u] + a_m * social;
            total += lambda[u];
        }
        total
    };

    let mut events = Vec::new();
    let mut t = 0.0;
    let mut upper = intensities(&excite, &mut lambda);
    loop {
        // Intensities only decay between events, so the current total bounds the future.
        let wait: f64 = rng.sample::<f64, _>(Exp1) / upper;
        t += wait;
        if t > config.horizon {
            break;
        }
        let f = (-beta * wait).exp();
        excite.iter_mut().for_each(|e| *e *= f);
        let total = intensities(&excite, &mut lambda);
        if rng.random::<f64>() * upper > total {
            upper = total;
            continue;
        }

        let mut r = rng.random::<f64>() * total;
        let mut user = n - 1;
        for (u, &l) in lambda.iter().enumerate() {
            if r < l {
                user = u;
                break;
            }
            r -= l;
        }

        let cause = attribute(
            rng.random::<f64>() * lambda[user],
            mu,
            a_s * excite[user],
            |j| a_m * excite[j],
            &adjacency[user],
        );

        let mut copied = false;
        let item = match cause {
            Cause::Friend(j) if rng.random_bool(config.social_copy_prob) => {
                match exciting_event(&history[j], t, beta, rng) {
                    Some(i) => {
                        copied = true;
                        i
                    }
                    None => {
                        let (items, w) = &preferences[user];
                        items[w.sample(rng)]
                    }
                }
            }
            _ => {
                let (items, w) = &preferences[user];
                items[w.sample(rng)]
            }
        };

        events.push(SimEvent { user, item, time: t, cause, copied });
        excite[user] += 1.0;
        history[user].push((t, item));
        upper = intensities(&excite, &mut lambda);
    }

    log::debug!("simulated {} events over {} users", events.len(), n);
    Ok(SimOutput { config: config.clone(), events, edges, adjacency })
}

/// Item of one past event, drawn in proportion to its kernel `e^{−β(t − s)}`.
fn exciting_event(history: &[(f64, usize)], t: f64, beta: f64, rng: &mut ChaCha8Rng) -> Option<usize> {
    let weights: Vec<f64> =
        history.iter().rev().map(|&(s, _)| (-beta * (t - s)).exp()).take_while(|&w| w > 1e-12).collect();
    let total: f64 = weights.iter().sum();
    if weights.is_empty() {
        return history.last().map(|&(_, i)| i);
    }
    let mut r = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if r < *w {
            return Some(history[history.len() - 1 - k].1);
        }
        r -= w;
    }
    Some(history[history.len() - weights.len()].1)
}

/// Maps a uniform draw `r ∈ [0, λ_u)` onto the intensity component it falls in.
fn attribute(mut r: f64, base: f64, own: f64, friend: impl Fn(usize) -> f64, friends: &[usize]) -> Cause {
    if r < base {
        return Cause::Base;
    }
    r -= base;
    if r < own {
        return Cause::SelfExcited;
    }
    r -= own;
    let mut fallback = if own > 0.0 { Cause::SelfExcited } else { Cause::Base };
    for &j in friends {
        let c = friend(j);
        if c > 0.0 {
            fallback = Cause::Friend(j);
        }
        if r < c {
            return Cause::Friend(j);
        }
        r -= c;
    }
    // rounding left a sliver unassigned
    fallback
}
