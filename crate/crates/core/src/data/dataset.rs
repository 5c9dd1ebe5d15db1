use std::collections::{BTreeSet, HashMap, HashSet};

use super::events::EventRecord;
use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Every user keeps at least this many events so that a training prefix, a
/// validation target and a test target all exist.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub item: usize,
    /// Days since the earliest event in the dataset.
    pub time: f64,
}

/// Leave-one-out split markers into a user's sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Split {
    pub validation: usize,
    pub test: usize,
}

/// Time-ordered per-user sequences over densely re-indexed users and items.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Vec<Event>>,
    pub num_users: usize,
    pub num_items: usize,
    pub split: Vec<Split>,
    /// Original ids, indexed by dense id.
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    /// Earliest raw timestamp, in seconds.
    pub time_origin: f64,
    /// 99th percentile of consecutive within-user intervals, in days.
    pub interval_clip: f64,
}

impl Dataset {
    /// Reserved item id used for padding slots.
    pub fn padding_item(&self) -> usize {
        self.num_items
    }

    pub fn train_len(&self, user: usize) -> usize {
        self.split[user].validation
    }

    pub fn train_events(&self, user: usize) -> &[Event] {
        &self.sequences[user][..self.train_len(user)]
    }

    pub fn validation_target(&self, user: usize) -> Event {
        self.sequences[user][self.split[user].validation]
    }

    pub fn test_target(&self, user: usize) -> Event {
        self.sequences[user][self.split[user].test]
    }

    pub fn last_train_time(&self, user: usize) -> f64 {
        self.train_events(user).last().map(|e| e.time).unwrap_or(0.0)
    }

    /// Every item the user interacted with, across the whole sequence.
    pub fn history(&self, user: usize) -> HashSet<usize> {
        self.sequences[user].iter().map(|e| e.item).collect()
    }

    pub fn user_index(&self) -> HashMap<u64, usize> {
        self.user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect()
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Clips an interval (days) to the dataset's 99th percentile.
    pub fn clip_interval(&self, dt: f64) -> f64 {
        dt.min(self.interval_clip)
    }

    /// Dense-id records in the event-log format, with times in seconds.
    pub fn to_records(&self) -> Vec<EventRecord> {
        let mut out = Vec::with_capacity(self.num_events());
        for (u, seq) in self.sequences.iter().enumerate() {
            for e in seq {
                out.push(EventRecord {
                    user_id: u as u64,
                    item_id: e.item as u64,
                    timestamp: e.time * SECONDS_PER_DAY,
                });
            }
        }
        out
    }
}

fn percentile(mut xs: Vec<f64>, q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let idx = ((xs.len() - 1) as f64 * q).round() as usize;
    xs[idx]
}

/// Deduplicates, filters to a fixpoint, re-indexes and splits a raw log.
pub fn build_dataset(events: &[EventRecord], min_user_events: usize, min_item_events: usize) -> Result<Dataset> {
    if min_user_events < 1 {
        return Err(Error::config("data.min_user_events", "must be >= 1"));
    }
    if min_item_events < 1 {
        return Err(Error::config("data.min_item_events", "must be >= 1"));
    }
    let min_user = min_user_events.max(MIN_SEQUENCE_LEN);

    let mut seen = HashSet::new();
    let mut kept: Vec<EventRecord> =
        events.iter().filter(|e| seen.insert((e.user_id, e.item_id, e.timestamp.to_bits()))).copied().collect();

    loop {
        let mut per_user: HashMap<u64, usize> = HashMap::new();
        let mut per_item: HashMap<u64, usize> = HashMap::new();
        for e in &kept {
            *per_user.entry(e.user_id).or_default() += 1;
            *per_item.entry(e.item_id).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|e| per_user[&e.user_id] >= min_user && per_item[&e.item_id] >= min_item_events);
        if kept.len() == before {
            break;
        }
    }
    if kept.is_empty() {
        return Err(Error::Data("no users survive filtering".into()));
    }

    let user_ids: Vec<u64> = kept.iter().map(|e| e.user_id).collect::<BTreeSet<_>>().into_iter().collect();
    let item_ids: Vec<u64> = kept.iter().map(|e| e.item_id).collect::<BTreeSet<_>>().into_iter().collect();
    let user_of: HashMap<u64, usize> = user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let item_of: HashMap<u64, usize> = item_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let time_origin = kept.iter().map(|e| e.timestamp).fold(f64::INFINITY, f64::min);

    let mut sequences: Vec<Vec<Event>> = vec![Vec::new(); user_ids.len()];
    for e in &kept {
        sequences[user_of[&e.user_id]]
            .push(Event { item: item_of[&e.item_id], time: (e.timestamp - time_origin) / SECONDS_PER_DAY });
    }
    for seq in &mut sequences {
        // stable: ties keep file order
        seq.sort_by(|a, b| a.time.total_cmp(&b.time));
    }

    let intervals: Vec<f64> = sequences.iter().flat_map(|s| s.windows(2).map(|w| w[1].time - w[0].time)).collect();
    let interval_clip = percentile(intervals, 0.99);
    let split = sequences.iter().map(|s| Split { validation: s.len() - 2, test: s.len() - 1 }).collect();

    Ok(Dataset {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        sequences,
        split,
        user_ids,
        item_ids,
        time_origin,
        interval_clip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::events::{format_events, parse_events_str};
    use proptest::prelude::*;
    use std::path::Path;

    fn rec(u: u64, i: u64, t: f64) -> EventRecord {
        EventRecord { user_id: u, item_id: i, timestamp: t }
    }

    #[test]
    fn user_below_threshold_is_removed() {
        let mut ev = Vec::new();
        for k in 0..4 {
            ev.push(rec(1, k, k as f64));
        }
        for k in 0..5 {
            ev.push(rec(2, k, k as f64));
        }
        let ds = build_dataset(&ev, 5, 1).unwrap();
        assert_eq!(ds.user_ids, vec![2]);
    }

    #[test]
    fn split_is_leave_one_out() {
        let ev = vec![rec(0, 10, 1.0), rec(0, 11, 2.0), rec(0, 12, 3.0), rec(0, 13, 4.0)];
        let ds = build_dataset(&ev, 1, 1).unwrap();
        let items: Vec<u64> = ds.train_events(0).iter().map(|e| ds.item_ids[e.item]).collect();
        assert_eq!(items, vec![10, 11]);
        assert_eq!(ds.item_ids[ds.validation_target(0).item], 12);
        assert_eq!(ds.item_ids[ds.test_target(0).item], 13);
    }

    #[test]
    fn unit_thresholds_remove_nothing() {
        let ev: Vec<EventRecord> = (0..9).map(|k| rec(k % 3, k, k as f64 * 10.0)).collect();
        let ds = build_dataset(&ev, 1, 1).unwrap();
        assert_eq!(ds.num_events(), 9);
        assert_eq!(ds.num_items, 9);
    }

    #[test]
    fn filtering_reaches_a_fixpoint() {
        // item 99 is rare; dropping it leaves user 1 with too few events,
        // which in turn makes item 7 rare.
        let mut ev = vec![rec(1, 99, 0.0), rec(1, 7, 1.0), rec(1, 8, 2.0)];
        for k in 0..4 {
            ev.push(rec(2, 8, k as f64));
            ev.push(rec(3, 8, k as f64 + 0.5));
        }
        ev.push(rec(2, 7, 9.0));
        let ds = build_dataset(&ev, 3, 2).unwrap();
        assert_eq!(ds.user_ids, vec![2, 3]);
        assert_eq!(ds.item_ids, vec![8]);
    }

    #[test]
    fn no_survivors_is_an_error() {
        let ev = vec![rec(0, 0, 0.0)];
        assert!(matches!(build_dataset(&ev, 5, 1), Err(Error::Data(_))));
        assert!(build_dataset(&ev, 0, 1).is_err());
    }

    #[test]
    fn exact_duplicates_dropped_repeats_kept() {
        let ev = vec![rec(0, 1, 5.0), rec(0, 1, 5.0), rec(0, 1, 6.0), rec(0, 2, 7.0), rec(0, 3, 8.0)];
        let ds = build_dataset(&ev, 1, 1).unwrap();
        assert_eq!(ds.sequences[0].len(), 4);
    }

    #[test]
    fn times_are_days_from_origin_and_ties_keep_order() {
        let ev = vec![rec(0, 3, 86_400.0 * 3.0), rec(0, 1, 86_400.0), rec(0, 2, 86_400.0), rec(0, 4, 86_400.0 * 2.0)];
        let ds = build_dataset(&ev, 1, 1).unwrap();
        let s = &ds.sequences[0];
        assert_eq!(s[0].time, 0.0);
        assert_eq!((ds.item_ids[s[0].item], ds.item_ids[s[1].item]), (1, 2));
        assert_eq!(s[3].time, 2.0);
    }

    proptest! {
        #[test]
        fn serialize_reparse_round_trip(raw in prop::collection::vec((0u64..6, 0u64..12, 0u32..10_000), 20..120)) {
            let ev: Vec<EventRecord> = raw.iter().map(|&(u, i, t)| rec(u, i, t as f64 * 37.0)).collect();
            let Ok(ds) = build_dataset(&ev, 1, 1) else { return Ok(()); };
            let text = format_events(&ds.to_records(), Some("round trip"));
            let parsed = parse_events_str(&text, Path::new("mem")).unwrap();
            let again = build_dataset(&parsed.records, 1, 1).unwrap();
            prop_assert_eq!(&again.split, &ds.split);
            prop_assert_eq!(again.sequences.len(), ds.sequences.len());
            for (a, b) in again.sequences.iter().zip(&ds.sequences) {
                prop_assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b) {
                    prop_assert_eq!(x.item, y.item);
                    prop_assert!((x.time - y.time).abs() <= 1e-9 * y.time.max(1.0));
                }
            }
        }

        #[test]
        fn sequences_sorted_and_ids_in_range(raw in prop::collection::vec((0u64..8, 0u64..20, 0u32..1000), 10..200)) {
            let ev: Vec<EventRecord> = raw.iter().map(|&(u, i, t)| rec(u, i, t as f64)).collect();
            let Ok(ds) = build_dataset(&ev, 3, 2) else { return Ok(()); };
            for s in &ds.sequences {
                prop_assert!(s.len() >= MIN_SEQUENCE_LEN);
                prop_assert!(s.windows(2).all(|w| w[0].time <= w[1].time));
                prop_assert!(s.iter().all(|e| e.item < ds.num_items && e.time >= 0.0 && e.time.is_finite()));
            }
        }
    }
}
