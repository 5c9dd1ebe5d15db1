use crate::data::dataset::Dataset;
use crate::data::social::SocialGraph;
use crate::data::window::{window_friend_events, FriendWindows};
use crate::diffmath::{Dropout, Tape, Var};
use crate::error::{Error, Result};
use crate::excitation::{
    build_masks, causal_mask, intervals, mutual_excite, scalar_intensity, self_excite, IntervalScale, MutualOutput,
    SelfOutput,
};
use crate::socialgraph::{graph_embed, GraphPlans, MetaPathIndex};

use super::config::ModelConfig;
use super::params::{GeneralVars, ModelParams, ModelVars};

/// One user's model input: their most recent own events and friend windows
/// cut off at the last own event.
#[derive(Clone, Debug, PartialEq)]
pub struct UserInput {
    pub user: usize,
    pub items: Vec<usize>,
    pub times: Vec<f64>,
    pub windows: FriendWindows,
}

impl UserInput {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn cutoff(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }
}

/// Builds the input from the first `upto` events of `user`'s sequence,
/// keeping at most `config.max_len` of the latest ones.
pub fn prepare_input(
    dataset: &Dataset,
    friends: &[usize],
    user: usize,
    upto: usize,
    config: &ModelConfig,
) -> UserInput {
    let seq = &dataset.sequences[user][..upto];
    let seq = &seq[seq.len().saturating_sub(config.max_len)..];
    let cutoff = seq.last().map_or(0.0, |e| e.time);
    UserInput {
        user,
        items: seq.iter().map(|e| e.item).collect(),
        times: seq.iter().map(|e| e.time).collect(),
        windows: window_friend_events(dataset, friends, config.window, cutoff),
    }
}

/// Graph-layer outputs for the whole catalogue, shared by every user on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphOut {
    /// `|U| x d`.
    pub users: Var,
    /// `(|I| + 1) x d`, padding row last.
    pub items: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// One fused user representation per requested cut, `cuts x d`.
    pub hybrid: Var,
    /// `T^S`, `l x d`.
    pub t_s: Var,
    /// Intensity at each own event, length `l`.
    pub lambdas: Var,
    pub mutual: Option<MutualOutput>,
    pub self_attention: Option<SelfOutput>,
}

/// `h_g = softmax(Q·Kᵀ/√d)·V` with `Q = h_n·W_Q`, `K = I·W_K`, `V = I·W_V`.
///
/// One row per cut; row `r` only sees items `0..=cuts[r]`.
pub fn general_interest_cuts(tape: &mut Tape, h_n: Var, items: Var, cuts: &[usize], p: &GeneralVars) -> Result<Var> {
    let l = tape.shape(items)[0];
    let d = tape.shape(items)[1];
    if l == 0 || cuts.is_empty() {
        return Err(Error::Invalid("general_interest: empty sequence".into()));
    }
    if let Some(&c) = cuts.iter().find(|&&c| c >= l) {
        return Err(Error::Invalid(format!("general_interest: cut {c} beyond {l} items")));
    }
    let h = tape.reshape(h_n, vec![1, d])?;
    let q = tape.matmul(h, p.w_query)?;
    let q = tape.gather_rows(q, &vec![0; cuts.len()])?;
    let k = tape.matmul(items, p.w_key)?;
    let v = tape.matmul(items, p.w_value)?;
    let s = tape.matmul_t(q, k)?;
    let s = tape.affine(s, 1.0 / (d as f64).sqrt(), 0.0)?;
    let visible: Vec<bool> = cuts.iter().flat_map(|&c| (0..l).map(move |j| j <= c)).collect();
    let a = tape.masked_softmax(s, &visible)?;
    Ok(tape.matmul(a, v)?)
}

/// General interest over the whole sequence, as a length-`d` vector.
pub fn general_interest(tape: &mut Tape, h_n: Var, items: Var, p: &GeneralVars) -> Result<Var> {
    let l = tape.shape(items)[0];
    let d = tape.shape(h_n).iter().product();
    let g = general_interest_cuts(tape, h_n, items, &[l.saturating_sub(1)], p)?;
    Ok(tape.reshape(g, vec![d])?)
}

/// `W_u·(h_s ‖ h_g)`, row-wise for `n x d` inputs or on single vectors.
pub fn fuse(tape: &mut Tape, h_s: Var, h_g: Var, w_u: Var) -> Result<Var> {
    let single = tape.shape(h_s).len() == 1;
    let cat = tape.concat_cols(&[h_s, h_g])?;
    let out = tape.matmul_t(cat, w_u)?;
    if single {
        let d = tape.shape(out)[1];
        return Ok(tape.reshape(out, vec![d])?);
    }
    Ok(out)
}

/// Pre-softmax scores `h·Iᵀ` against the real items (padding row excluded).
/// `items` is the embedding table itself, not the graph-layer output.
pub fn item_logits(tape: &mut Tape, hybrid: Var, items: Var) -> Result<Var> {
    let n = tape.shape(items)[0] - 1;
    let real = tape.slice_rows(items, 0, n)?;
    Ok(tape.matmul_t(hybrid, real)?)
}

/// `softmax(h·Iᵀ)` over real items.
pub fn score_items(tape: &mut Tape, hybrid: Var, items: Var) -> Result<Var> {
    let logits = item_logits(tape, hybrid, items)?;
    let n = tape.value(logits).len();
    Ok(tape.masked_softmax(logits, &vec![true; n])?)
}

/// Row `i` is the mean of rows `j < i`; row 0 is itself.
fn causal_mean_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let l = tape.shape(x)[0];
    let mut w = vec![0.0; l * l];
    w[0] = 1.0;
    for i in 1..l {
        for j in 0..i {
            w[i * l + j] = 1.0 / i as f64;
        }
    }
    let w = tape.constant(vec![l, l], w)?;
    Ok(tape.matmul(w, x)?)
}

/// Parameters together with the fixed graph structure they run on.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub plans: GraphPlans,
    pub scale: IntervalScale,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        params: ModelParams,
        graph: &SocialGraph,
        index: &MetaPathIndex,
        interval_clip: f64,
    ) -> Self {
        let scale = IntervalScale {
            clip: if interval_clip > 0.0 { interval_clip } else { f64::INFINITY },
            log: config.log_intervals,
        };
        Self { plans: GraphPlans::new(graph, index), config, params, scale }
    }

    pub fn record(&self, tape: &mut Tape) -> ModelVars {
        self.params.record(tape)
    }

    pub fn embed(&self, tape: &mut Tape, vars: &ModelVars) -> Result<GraphOut> {
        let (users, items) =
            graph_embed(tape, vars.user, vars.item, &vars.graph, &self.plans, !self.config.ablation.no_ge)?;
        Ok(GraphOut { users, items })
    }

    /// Runs the sequence part for one user and fuses at each cut.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        g: &GraphOut,
        input: &UserInput,
        cuts: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Encoded> {
        let ab = self.config.ablation;
        let temporal = !ab.no_tc;
        let l = input.len();
        if l == 0 {
            return Err(Error::Invalid(format!("user {}: empty input sequence", input.user)));
        }
        let events = tape.gather_rows(g.items, &input.items)?;
        let events = crate::diffmath::maybe_dropout(tape, events, dropout.as_deref_mut())?;

        let (t_m, mutual) = if ab.no_mt {
            (events, None)
        } else {
            let w = &input.windows;
            let friends = if w.is_empty() {
                None
            } else {
                let f = tape.gather_rows(g.items, &w.items)?;
                Some(crate::diffmath::maybe_dropout(tape, f, dropout.as_deref_mut())?)
            };
            let mask = build_masks(&input.times, &w.times, &w.pad);
            let dt = intervals(&input.times, &w.times, &mask, self.scale);
            let m = mutual_excite(tape, events, friends, &dt, &mask, &vars.mutual, temporal, dropout.as_deref_mut())?;
            (m.t_m, Some(m))
        };

        let (t_s, self_attention) = if ab.no_st {
            (causal_mean_pool(tape, t_m)?, None)
        } else {
            let dt = intervals(&input.times, &input.times, &causal_mask(l), self.scale);
            let s = self_excite(tape, t_m, &dt, &vars.self_, temporal, dropout)?;
            (s.t_s, Some(s))
        };
        let lambdas = scalar_intensity(tape, t_s, &vars.self_)?;

        let h_n = tape.gather_rows(g.users, &[input.user])?;
        let h_g = general_interest_cuts(tape, h_n, events, cuts, &vars.general)?;
        let h_s = tape.gather_rows(t_s, cuts)?;
        let hybrid = fuse(tape, h_s, h_g, vars.fusion)?;
        Ok(Encoded { hybrid, t_s, lambdas, mutual, self_attention })
    }

    /// Next-item logits over real items after each input's last event.
    pub fn score_users(&self, inputs: &[UserInput]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let g = self.embed(&mut tape, &vars)?;
        let mut out = Vec::with_capacity(inputs.len());
        for input in inputs {
            let enc = self.encode(&mut tape, &vars, &g, input, &[input.len() - 1], None)?;
            let logits = item_logits(&mut tape, enc.hybrid, vars.item)?;
            out.push(tape.value(logits).to_vec());
        }
        Ok(out)
    }
}
