use super::dataset::Dataset;
use super::social::SocialGraph;

/// Closed time span `[first, last]` of a user's events.
pub fn span(dataset: &Dataset, user: usize) -> Option<(f64, f64)> {
    let seq = &dataset.sequences[user];
    Some((seq.first()?.time, seq.last()?.time))
}

pub fn spans_overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Fraction of friend pairs whose event spans intersect ("time-efficient
/// friends"). Each undirected edge is counted once; no edges gives 0.
pub fn compute_tef(dataset: &Dataset, graph: &SocialGraph) -> f64 {
    let mut pairs = 0usize;
    let mut hits = 0usize;
    for (u, v) in graph.edges() {
        let (Some(a), Some(b)) = (span(dataset, u), span(dataset, v)) else {
            continue;
        };
        pairs += 1;
        if spans_overlap(a, b) {
            hits += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        hits as f64 / pairs as f64
    }
}
