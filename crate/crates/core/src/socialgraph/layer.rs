use rand::Rng;

use super::metapath::MetaPathIndex;
use crate::data::social::SocialGraph;
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::Result;

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.01;

/// User table `|U| x d` and item table `(|I| + 1) x d`; the last item row is padding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub user: Tensor,
    pub item: Tensor,
}

impl EmbeddingTable {
    pub fn init<R: Rng + ?Sized>(num_users: usize, num_items: usize, d: usize, rng: &mut R) -> Self {
        Self {
            user: Tensor::randn(&[num_users, d], INIT_STD, rng),
            item: Tensor::randn(&[num_items + 1, d], INIT_STD, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.user.shape()[1]
    }

    pub fn num_users(&self) -> usize {
        self.user.shape()[0]
    }

    /// Real items, excluding the padding row.
    pub fn num_items(&self) -> usize {
        self.item.shape()[0] - 1
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("embed.user", &self.user), ("embed.item", &self.item)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("embed.user", &mut self.user), ("embed.item", &mut self.item)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphLayerParams {
    pub w_user: Tensor,
    pub b_user: Tensor,
    /// Length `2d`: the first half scores the centre node, the second the neighbour.
    pub v_user: Tensor,
    pub w_item: Tensor,
    pub b_item: Tensor,
    pub v_item: Tensor,
    /// One weight per meta-path order.
    pub order_weights: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub w_user: Var,
    pub b_user: Var,
    pub v_user: Var,
    pub w_item: Var,
    pub b_item: Var,
    pub v_item: Var,
    pub order_weights: Var,
}

impl GraphLayerParams {
    pub fn init<R: Rng + ?Sized>(d: usize, orders: usize, rng: &mut R) -> Self {
        Self {
            w_user: Tensor::randn(&[d, d], INIT_STD, rng),
            b_user: Tensor::zeros(&[d]),
            v_user: Tensor::randn(&[2 * d], INIT_STD, rng),
            w_item: Tensor::randn(&[d, d], INIT_STD, rng),
            b_item: Tensor::zeros(&[d]),
            v_item: Tensor::randn(&[2 * d], INIT_STD, rng),
            order_weights: Tensor::filled(&[orders], 1.0),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("graph.w_user", &self.w_user),
            ("graph.b_user", &self.b_user),
            ("graph.v_user", &self.v_user),
            ("graph.w_item", &self.w_item),
            ("graph.b_item", &self.b_item),
            ("graph.v_item", &self.v_item),
            ("graph.order_weights", &self.order_weights),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("graph.w_user", &mut self.w_user),
            ("graph.b_user", &mut self.b_user),
            ("graph.v_user", &mut self.v_user),
            ("graph.w_item", &mut self.w_item),
            ("graph.b_item", &mut self.b_item),
            ("graph.v_item", &mut self.v_item),
            ("graph.order_weights", &mut self.order_weights),
        ]
    }

    pub fn record(&self, tape: &mut Tape) -> GraphVars {
        GraphVars {
            w_user: tape.leaf(&self.w_user),
            b_user: tape.leaf(&self.b_user),
            v_user: tape.leaf(&self.v_user),
            w_item: tape.leaf(&self.w_item),
            b_item: tape.leaf(&self.b_item),
            v_item: tape.leaf(&self.v_item),
            order_weights: tape.leaf(&self.order_weights),
        }
    }
}

/// Padded neighbour lists laid out for batched attention.
///
/// A node with no neighbours attends to itself, which reduces the aggregation
/// to `σ(W·h + b)` of its own embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighbourPlan {
    pub rows: usize,
    pub width: usize,
    /// Neighbour lists after the self fallback.
    pub lists: Vec<Vec<usize>>,
    self_score: Vec<usize>,
    neighbour_score: Vec<usize>,
    neighbour_rows: Vec<usize>,
    pub visible: Vec<bool>,
}

impl NeighbourPlan {
    pub fn new(lists: &[Vec<usize>]) -> Self {
        let lists: Vec<Vec<usize>> =
            lists.iter().enumerate().map(|(i, l)| if l.is_empty() { vec![i] } else { l.clone() }).collect();
        let rows = lists.len();
        let width = lists.iter().map(Vec::len).max().unwrap_or(1);
        let n = rows * width;
        let mut plan = Self {
            rows,
            width,
            lists: Vec::new(),
            self_score: Vec::with_capacity(n),
            neighbour_score: Vec::with_capacity(n),
            neighbour_rows: Vec::with_capacity(n),
            visible: Vec::with_capacity(n),
        };
        for (i, l) in lists.iter().enumerate() {
            for k in 0..width {
                let j = l.get(k).copied();
                plan.self_score.push(2 * i);
                plan.neighbour_score.push(2 * j.unwrap_or(i) + 1);
                plan.neighbour_rows.push(j.unwrap_or(i));
                plan.visible.push(j.is_some());
            }
        }
        plan.lists = lists;
        plan
    }
}

/// Output `rows x d` plus the attention matrix `rows x width`.
#[derive(Clone, Copy, Debug)]
pub struct Aggregation {
    pub output: Var,
    pub attention: Var,
}

/// `h'_i = σ(Σ_j a_ij·W·h_j + b)` with
/// `a_i = softmax_j σ(v·[W·h_i ‖ W·h_j])` over the plan's neighbour lists.
pub fn attend_neighbours(
    tape: &mut Tape,
    table: Var,
    w: Var,
    b: Var,
    v: Var,
    plan: &NeighbourPlan,
) -> Result<Aggregation> {
    let d = tape.shape(w)[0];
    let wh = tape.matmul_t(table, w)?;
    let v2 = tape.reshape(v, vec![2, d])?;
    let scores = tape.matmul_t(wh, v2)?;
    let scores = tape.reshape(scores, vec![2 * plan.rows, 1])?;
    let centre = tape.gather_rows(scores, &plan.self_score)?;
    let other = tape.gather_rows(scores, &plan.neighbour_score)?;
    let logits = tape.add(centre, other)?;
    let logits = tape.sigmoid(logits)?;
    let logits = tape.reshape(logits, vec![plan.rows, plan.width])?;
    let attention = tape.masked_softmax(logits, &plan.visible)?;
    let values = tape.gather_rows(wh, &plan.neighbour_rows)?;
    let agg = tape.segment_weighted_sum(attention, values)?;
    let agg = tape.add_row(agg, b)?;
    let output = tape.sigmoid(agg)?;
    Ok(Aggregation { output, attention })
}

/// Attention plans for the user graph and each meta-path order.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphPlans {
    pub users: NeighbourPlan,
    /// One plan per order over `|I| + 1` rows; the padding row only sees itself.
    pub items: Vec<NeighbourPlan>,
}

impl GraphPlans {
    pub fn new(graph: &SocialGraph, index: &MetaPathIndex) -> Self {
        Self { users: NeighbourPlan::new(&graph.user_adjacency), items: Self::item_plans(index) }
    }

    pub fn item_plans(index: &MetaPathIndex) -> Vec<NeighbourPlan> {
        index
            .neighbours
            .iter()
            .map(|lists| {
                let mut l = lists.clone();
                l.push(Vec::new());
                NeighbourPlan::new(&l)
            })
            .collect()
    }
}

pub fn user_aggregate_planned(tape: &mut Tape, users: Var, p: &GraphVars, plan: &NeighbourPlan) -> Result<Aggregation> {
    attend_neighbours(tape, users, p.w_user, p.b_user, p.v_user, plan)
}

/// Per-order aggregations and their order-weighted mean `(1/l)·Σ_k c_k·h^{φ_k}`.
pub fn item_aggregate_planned(
    tape: &mut Tape,
    items: Var,
    p: &GraphVars,
    plans: &[NeighbourPlan],
) -> Result<(Var, Vec<Aggregation>)> {
    let mut per_order = Vec::with_capacity(plans.len());
    let mut total: Option<Var> = None;
    for (k, plan) in plans.iter().enumerate() {
        let agg = attend_neighbours(tape, items, p.w_item, p.b_item, p.v_item, plan)?;
        let c = tape.select(p.order_weights, k)?;
        let scaled = tape.scale_by(agg.output, c)?;
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
        per_order.push(agg);
    }
    let total = total.ok_or_else(|| crate::Error::Invalid("item aggregation needs at least one order".into()))?;
    let mean = tape.affine(total, 1.0 / plans.len() as f64, 0.0)?;
    Ok((mean, per_order))
}

pub fn user_aggregate(tape: &mut Tape, users: Var, p: &GraphVars, graph: &SocialGraph) -> Result<Aggregation> {
    user_aggregate_planned(tape, users, p, &NeighbourPlan::new(&graph.user_adjacency))
}

/// `items` must carry the padding row; the result keeps the same row count.
pub fn item_aggregate(tape: &mut Tape, items: Var, p: &GraphVars, index: &MetaPathIndex) -> Result<Var> {
    Ok(item_aggregate_planned(tape, items, p, &GraphPlans::item_plans(index))?.0)
}

/// Graph-layer user and item representations, or the raw tables when disabled.
pub fn graph_embed(
    tape: &mut Tape,
    users: Var,
    items: Var,
    p: &GraphVars,
    plans: &GraphPlans,
    enabled: bool,
) -> Result<(Var, Var)> {
    if !enabled {
        return Ok((users, items));
    }
    let hu = user_aggregate_planned(tape, users, p, &plans.users)?.output;
    let (hi, _) = item_aggregate_planned(tape, items, p, &plans.items)?;
    Ok((hu, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check_many;
    use crate::socialgraph::metapath::build_metapath_neighbors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn row(t: &Tensor, r: usize) -> Vec<f64> {
        t.row(r).to_vec()
    }

    /// `W·x` with `W` stored row-major `d x d`.
    fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d).map(|i| (0..d).map(|k| w.values()[i * d + k] * x[k]).sum()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Straight-line evaluation of the aggregation for one node.
    fn oracle(table: &Tensor, w: &Tensor, b: &Tensor, v: &Tensor, i: usize, nb: &[usize]) -> Vec<f64> {
        let d = w.shape()[0];
        let nb: Vec<usize> = if nb.is_empty() { vec![i] } else { nb.to_vec() };
        let wi = matvec(w, &row(table, i));
        let logits: Vec<f64> = nb
            .iter()
            .map(|&j| {
                let wj = matvec(w, &row(table, j));
                sig(dot(&v.values()[..d], &wi) + dot(&v.values()[d..], &wj))
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let mut acc = b.values().to_vec();
        for (&j, l) in nb.iter().zip(&logits) {
            let a = (l - m).exp() / z;
            let wj = matvec(w, &row(table, j));
            for k in 0..d {
                acc[k] += a * wj[k];
            }
        }
        acc.into_iter().map(sig).collect()
    }

    fn params(d: usize, orders: usize, seed: u64) -> (EmbeddingTable, GraphLayerParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = EmbeddingTable::init(3, 4, d, &mut rng);
        let mut g = GraphLayerParams::init(d, orders, &mut rng);
        // larger weights so attention is far from uniform
        for x in t.user.values_mut().iter_mut().chain(t.item.values_mut()) {
            *x *= 100.0;
        }
        for x in g
            .w_user
            .values_mut()
            .iter_mut()
            .chain(g.v_user.values_mut())
            .chain(g.w_item.values_mut())
            .chain(g.v_item.values_mut())
        {
            *x *= 100.0;
        }
        g.b_user.values_mut()[0] = 0.3;
        g.b_item.values_mut()[1] = -0.2;
        (t, g)
    }

    fn toy_graph() -> SocialGraph {
        let items: Vec<BTreeSet<usize>> = vec![[0, 1].into(), [1, 2].into(), [3].into()];
        SocialGraph::from_dense_edges(3, &[(0, 1), (0, 2)], items)
    }

    #[test]
    fn users_match_straight_line_oracle() {
        let (t, g) = params(4, 2, 1);
        let graph = SocialGraph::from_dense_edges(4, &[(0, 1), (0, 2)], vec![BTreeSet::new(); 4]);
        let mut users = t.user.clone();
        users = Tensor::new(vec![4, 4], users.values().iter().copied().chain([0.5, -0.2, 0.1, 0.9]).collect()).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(&users);
        let vars = g.record(&mut tape);
        let out = user_aggregate(&mut tape, u, &vars, &graph).unwrap();
        let got = tape.to_tensor(out.output);
        for i in 0..4 {
            let want = oracle(&users, &g.w_user, &g.b_user, &g.v_user, i, graph.friends(i));
            for (a, b) in got.row(i).iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_and_identical_friends() {
        let (t, g) = params(4, 1, 2);
        let d = 4;
        // users 1 and 2 share an embedding
        let mut vals = t.user.values().to_vec();
        let (a, b) = vals.split_at_mut(2 * d);
        b[..d].copy_from_slice(&a[d..2 * d]);
        let users = Tensor::new(vec![3, d], vals).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(&users);
        let vars = g.record(&mut tape);
        let graph = SocialGraph::from_dense_edges(3, &[(0, 1), (0, 2)], vec![BTreeSet::new(); 3]);
        let out = user_aggregate(&mut tape, u, &vars, &graph).unwrap();
        let att = tape.value(out.attention).to_vec();
        assert_eq!(&att[..2], &[0.5, 0.5]);
        // user 1 has the single friend 0
        assert_eq!(att[2], 1.0);
    }

    #[test]
    fn items_match_straight_line_oracle() {
        let (t, mut g) = params(4, 2, 3);
        g.order_weights = Tensor::vector(vec![0.7, 1.6]);
        let graph = toy_graph();
        let index = build_metapath_neighbors(&graph, 4, 2, 50, 0).unwrap();
        let mut tape = Tape::new();
        let it = tape.leaf(&t.item);
        let vars = g.record(&mut tape);
        let out = item_aggregate(&mut tape, it, &vars, &index).unwrap();
        let got = tape.to_tensor(out);
        for i in 0..4 {
            let h1 = oracle(&t.item, &g.w_item, &g.b_item, &g.v_item, i, index.get(1, i));
            let h2 = oracle(&t.item, &g.w_item, &g.b_item, &g.v_item, i, index.get(2, i));
            for k in 0..4 {
                let want = (0.7 * h1[k] + 1.6 * h2[k]) / 2.0;
                assert!((got.row(i)[k] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_order_and_zero_weights() {
        let (t, mut g) = params(4, 1, 4);
        let graph = toy_graph();
        let index = build_metapath_neighbors(&graph, 4, 1, 50, 0).unwrap();
        let plans = GraphPlans::new(&graph, &index);
        let mut tape = Tape::new();
        let it = tape.leaf(&t.item);
        let vars = g.record(&mut tape);
        let (mean, orders) = item_aggregate_planned(&mut tape, it, &vars, &plans.items).unwrap();
        assert_eq!(tape.value(mean), tape.value(orders[0].output));

        g.order_weights = Tensor::vector(vec![0.0]);
        let mut tape = Tape::new();
        let it = tape.leaf(&t.item);
        let vars = g.record(&mut tape);
        let (mean, _) = item_aggregate_planned(&mut tape, it, &vars, &plans.items).unwrap();
        assert!(tape.value(mean).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (t, g) = params(4, 2, 5);
        let graph = toy_graph();
        let index = build_metapath_neighbors(&graph, 4, 2, 50, 0).unwrap();
        let plans = GraphPlans::new(&graph, &index);
        let mut tape = Tape::new();
        let (u, it) = (tape.leaf(&t.user), tape.leaf(&t.item));
        let vars = g.record(&mut tape);
        let mut atts =
            vec![(user_aggregate_planned(&mut tape, u, &vars, &plans.users).unwrap().attention, plans.users.width)];
        let (_, orders) = item_aggregate_planned(&mut tape, it, &vars, &plans.items).unwrap();
        atts.extend(orders.iter().zip(&plans.items).map(|(o, p)| (o.attention, p.width)));
        for (a, w) in atts {
            for r in tape.value(a).chunks(w) {
                assert!(r.iter().all(|&x| x >= 0.0));
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn neighbour_order_does_not_matter() {
        let (t, g) = params(4, 1, 6);
        let lists = vec![vec![1, 2, 3], vec![0], vec![3, 0], vec![], vec![]];
        let shuffled = vec![vec![3, 1, 2], vec![0], vec![0, 3], vec![], vec![]];
        let eval = |l: &[Vec<usize>]| {
            let mut tape = Tape::new();
            let it = tape.leaf(&t.item);
            let vars = g.record(&mut tape);
            let plan = NeighbourPlan::new(l);
            let out = attend_neighbours(&mut tape, it, vars.w_item, vars.b_item, vars.v_item, &plan).unwrap();
            tape.value(out.output).to_vec()
        };
        let (a, b) = (eval(&lists), eval(&shuffled));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_layer_is_identity() {
        let (t, g) = params(4, 2, 7);
        let graph = toy_graph();
        let index = build_metapath_neighbors(&graph, 4, 2, 50, 0).unwrap();
        let plans = GraphPlans::new(&graph, &index);
        let mut tape = Tape::new();
        let (u, it) = (tape.leaf(&t.user), tape.leaf(&t.item));
        let vars = g.record(&mut tape);
        let (hu, hi) = graph_embed(&mut tape, u, it, &vars, &plans, false).unwrap();
        assert_eq!(tape.value(hu), t.user.values());
        assert_eq!(tape.value(hi), t.item.values());
    }

    #[test]
    fn graph_params_pass_gradcheck() {
        let (t, g) = params(3, 2, 8);
        let graph = toy_graph();
        let index = build_metapath_neighbors(&graph, 4, 2, 50, 0).unwrap();
        let plans = GraphPlans::new(&graph, &index);
        let mut inputs: Vec<Tensor> = g.named().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.push(t.user.clone());
        inputs.push(t.item.clone());
        let err = grad_check_many(
            |tape, v| {
                let vars = GraphVars {
                    w_user: v[0],
                    b_user: v[1],
                    v_user: v[2],
                    w_item: v[3],
                    b_item: v[4],
                    v_item: v[5],
                    order_weights: v[6],
                };
                let (hu, hi) = graph_embed(tape, v[7], v[8], &vars, &plans, true).map_err(|e| match e {
                    crate::Error::Diff(d) => d,
                    e => panic!("{e}"),
                })?;
                let a = tape.sum_squares(hu)?;
                let w = tape.constant(vec![5, 3], (0..15).map(|k| (k as f64 * 0.37).sin()).collect())?;
                let b = tape.mul(hi, w)?;
                let b = tape.sum(b)?;
                tape.add(a, b)
            },
            &mut inputs,
            1e-4,
            None,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
