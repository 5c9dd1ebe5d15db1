use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::dataset::Dataset;
use crate::data::social::SocialGraph;
use crate::diffmath::Tape;
use crate::error::{Error, Result};
use crate::excitation::{causal_mask, intervals, self_excite};
use crate::model::Model;
use crate::socialgraph::user_aggregate_planned;

use super::evaluate::{evaluation_inputs, Target};

/// Attention weights of one user, with raw ids.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub user: u64,
    pub event_items: Vec<u64>,
    pub event_times: Vec<f64>,
    /// Graph-layer attention of the user over their friends (H1).
    pub friend_ids: Vec<u64>,
    pub graph_attention: Vec<f64>,
    /// Friend-window slots; `None` marks padding.
    pub friend_event_items: Vec<Option<u64>>,
    pub friend_event_times: Vec<f64>,
    /// Position singled out for inspection.
    pub target: usize,
    /// Mutual attention (H2), one row per own event: the friend slots, then
    /// the own-event cell used when no friend event is visible.
    pub mutual: Vec<Vec<f64>>,
    /// Self attention with (H3) and without (H4) the temporal terms.
    pub self_temporal: Vec<Vec<f64>>,
    pub self_plain: Vec<Vec<f64>>,
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_list<T: std::str::FromStr>(s: &str, line: usize) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|x| {
            x.parse().map_err(|_| Error::Format { path: "<attention>".into(), line, msg: format!("bad value `{x}`") })
        })
        .collect()
}

impl AttentionRecord {
    /// `key<TAB>values` lines; matrices take one line per row.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "user\t{}", self.user);
        let _ = writeln!(s, "event_items\t{}", join(&self.event_items));
        let _ = writeln!(s, "event_times\t{}", join(&self.event_times));
        let _ = writeln!(s, "friends\t{}", join(&self.friend_ids));
        let _ = writeln!(s, "H1_graph\t{}", join(&self.graph_attention));
        let fi: Vec<String> =
            self.friend_event_items.iter().map(|x| x.map_or("pad".to_string(), |v| v.to_string())).collect();
        let _ = writeln!(s, "friend_event_items\t{}", fi.join(" "));
        let _ = writeln!(s, "friend_event_times\t{}", join(&self.friend_event_times));
        let _ = writeln!(s, "target\t{}", self.target);
        for (key, rows) in [
            ("H2_mutual", &self.mutual),
            ("H3_self_temporal", &self.self_temporal),
            ("H4_self_plain", &self.self_plain),
        ] {
            for r in rows {
                let _ = writeln!(s, "{key}\t{}", join(r));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = AttentionRecord {
            user: 0,
            event_items: Vec::new(),
            event_times: Vec::new(),
            friend_ids: Vec::new(),
            graph_attention: Vec::new(),
            friend_event_items: Vec::new(),
            friend_event_times: Vec::new(),
            target: 0,
            mutual: Vec::new(),
            self_temporal: Vec::new(),
            self_plain: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            let (key, rest) = line.split_once('\t').unwrap_or((line, ""));
            match key {
                "user" => r.user = parse_list(rest, n)?.first().copied().unwrap_or(0),
                "event_items" => r.event_items = parse_list(rest, n)?,
                "event_times" => r.event_times = parse_list(rest, n)?,
                "friends" => r.friend_ids = parse_list(rest, n)?,
                "H1_graph" => r.graph_attention = parse_list(rest, n)?,
                "friend_event_items" => {
                    r.friend_event_items = rest
                        .split_whitespace()
                        .map(|x| if x == "pad" { Ok(None) } else { parse_list::<u64>(x, n).map(|v| Some(v[0])) })
                        .collect::<Result<_>>()?
                }
                "friend_event_times" => r.friend_event_times = parse_list(rest, n)?,
                "target" => r.target = parse_list(rest, n)?.first().copied().unwrap_or(0),
                "H2_mutual" => r.mutual.push(parse_list(rest, n)?),
                "H3_self_temporal" => r.self_temporal.push(parse_list(rest, n)?),
                "H4_self_plain" => r.self_plain.push(parse_list(rest, n)?),
                "" => {}
                other => {
                    return Err(Error::Format {
                        path: "<attention>".into(),
                        line: n,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        Ok(r)
    }
}

fn rows(values: &[f64], cols: usize) -> Vec<Vec<f64>> {
    values.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Attention weights for `user` (dense index) on their full pre-test input.
/// `target` defaults to the last input event.
pub fn export_attention(
    model: &Model,
    dataset: &Dataset,
    graph: &SocialGraph,
    user: usize,
    target: Option<usize>,
) -> Result<AttentionRecord> {
    if user >= dataset.num_users {
        return Err(Error::Invalid(format!("unknown user index {user} ({} users)", dataset.num_users)));
    }
    let (input, _) = evaluation_inputs(model, dataset, graph, Target::Test).swap_remove(user);
    let l = input.len();
    let target = target.unwrap_or(l - 1);
    if target >= l {
        return Err(Error::Invalid(format!("target position {target} beyond {l} events")));
    }

    let mut tape = Tape::new();
    let vars = model.record(&mut tape);
    let user_att = user_aggregate_planned(&mut tape, vars.user, &vars.graph, &model.plans.users)?;
    let width = model.plans.users.width;
    let friends = &model.plans.users.lists[user];
    let graph_attention = tape.value(user_att.attention)[user * width..user * width + friends.len()].to_vec();

    let g = model.embed(&mut tape, &vars)?;
    let enc = model.encode(&mut tape, &vars, &g, &input, &[l - 1], None)?;

    let mutual = match &enc.mutual {
        Some(m) => {
            let a = tape.value(m.attention);
            let cols = m.friend_cols + l;
            (0..l)
                .map(|i| {
                    let row = &a[i * cols..(i + 1) * cols];
                    let mut r = row[..m.friend_cols].to_vec();
                    r.push(row[m.friend_cols + i]);
                    r
                })
                .collect()
        }
        None => Vec::new(),
    };

    let (self_temporal, self_plain) = match &enc.self_attention {
        Some(s) => {
            let t_m = enc.mutual.as_ref().map_or_else(|| tape.gather_rows(g.items, &input.items), |m| Ok(m.t_m))?;
            let dt = intervals(&input.times, &input.times, &causal_mask(l), model.scale);
            let plain = self_excite(&mut tape, t_m, &dt, &vars.self_, false, None)?;
            (rows(tape.value(s.attention), l), rows(tape.value(plain.attention), l))
        }
        None => (Vec::new(), Vec::new()),
    };

    let item_id = |i: usize| dataset.item_ids[i];
    Ok(AttentionRecord {
        user: dataset.user_ids[user],
        event_items: input.items.iter().map(|&i| item_id(i)).collect(),
        event_times: input.times.clone(),
        friend_ids: friends.iter().map(|&f| dataset.user_ids[f]).collect(),
        graph_attention,
        friend_event_items: input
            .windows
            .items
            .iter()
            .zip(&input.windows.pad)
            .map(|(&i, &p)| (!p).then(|| item_id(i)))
            .collect(),
        friend_event_times: input.windows.times.clone(),
        target,
        mutual,
        self_temporal,
        self_plain,
    })
}

pub fn write_attention(path: &Path, record: &AttentionRecord) -> Result<()> {
    fs::write(path, record.to_text()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalcli::gradcheck::{toy_instance, toy_model};
    use crate::model::ModelConfig;

    fn record(user: usize) -> AttentionRecord {
        let (ds, graph) = toy_instance().unwrap();
        let m = toy_model(&ds, &graph, &ModelConfig { d: 4, window: 3, ..Default::default() }).unwrap();
        export_attention(&m, &ds, &graph, user, None).unwrap()
    }

    #[test]
    fn rows_normalise_and_future_cells_are_zero() {
        for u in 0..4 {
            let r = record(u);
            assert!((r.graph_attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let d_f = r.friend_event_times.len();
            for (i, row) in r.mutual.iter().enumerate() {
                assert_eq!(row.len(), d_f + 1);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for w in 0..d_f {
                    if r.friend_event_items[w].is_none() || r.friend_event_times[w] > r.event_times[i] {
                        assert_eq!(row[w], 0.0);
                    }
                }
            }
            for m in [&r.self_temporal, &r.self_plain] {
                for (i, row) in m.iter().enumerate() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(row[i.max(1)..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn temporal_terms_change_self_attention() {
        let r = record(1);
        assert_ne!(r.self_temporal, r.self_plain);
    }

    #[test]
    fn text_round_trip_and_errors() {
        let r = record(2);
        assert_eq!(AttentionRecord::from_text(&r.to_text()).unwrap(), r);
        assert!(AttentionRecord::from_text("bogus\t1").is_err());
        let (ds, graph) = toy_instance().unwrap();
        let m = toy_model(&ds, &graph, &ModelConfig { d: 4, ..Default::default() }).unwrap();
        assert!(export_attention(&m, &ds, &graph, 4, None).is_err());
    }
}
