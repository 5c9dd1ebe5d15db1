use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One implicit-feedback interaction, as read from an event log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventRecord {
    pub user_id: u64,
    pub item_id: u64,
    /// Seconds since the epoch.
    pub timestamp: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedEvents {
    pub records: Vec<EventRecord>,
    /// Non-comment, non-blank lines that could not be parsed.
    pub malformed: usize,
}

/// Lines allowed to be malformed before the whole file is rejected.
const MAX_MALFORMED_FRACTION: f64 = 0.10;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn check_malformed(path: &Path, malformed: usize, total: usize, first_line: Option<usize>) -> Result<()> {
    if total > 0 && malformed as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            malformed,
            total,
            first_line: first_line.unwrap_or(0),
        });
    }
    Ok(())
}

fn parse_event_line(line: &str) -> Option<EventRecord> {
    let mut fields = line.split('\t');
    let user_id = fields.next()?.trim().parse().ok()?;
    let item_id = fields.next()?.trim().parse().ok()?;
    let timestamp: f64 = fields.next()?.trim().parse().ok()?;
    if fields.next().is_some() || !timestamp.is_finite() {
        return None;
    }
    Some(EventRecord { user_id, item_id, timestamp })
}

/// Parses `user<TAB>item<TAB>timestamp` lines; `#` lines are comments.
pub fn parse_events_str(text: &str, path: &Path) -> Result<ParsedEvents> {
    let mut out = ParsedEvents::default();
    let mut total = 0;
    let mut first_bad = None;
    for (lineno, line) in data_lines(text) {
        total += 1;
        match parse_event_line(line) {
            Some(r) => out.records.push(r),
            None => {
                out.malformed += 1;
                first_bad.get_or_insert(lineno);
                log::debug!("{}:{lineno}: malformed event line", path.display());
            }
        }
    }
    check_malformed(path, out.malformed, total, first_bad)?;
    if out.records.is_empty() {
        log::warn!("{}: no events", path.display());
    } else if out.malformed > 0 {
        log::warn!("{}: skipped {} malformed lines", path.display(), out.malformed);
    }
    Ok(out)
}

pub fn parse_events(path: &Path) -> Result<ParsedEvents> {
    parse_events_str(&read(path)?, path)
}

/// Parses `user<TAB>friend` lines. Symmetrization happens when the graph is built.
pub fn parse_social_str(text: &str, path: &Path) -> Result<Vec<(u64, u64)>> {
    let mut edges = Vec::new();
    let mut malformed = 0;
    let mut total = 0;
    let mut first_bad = None;
    for (lineno, line) in data_lines(text) {
        total += 1;
        let mut f = line.split('\t');
        let parsed = (|| {
            let a = f.next()?.trim().parse().ok()?;
            let b = f.next()?.trim().parse().ok()?;
            f.next().is_none().then_some((a, b))
        })();
        match parsed {
            Some(e) => edges.push(e),
            None => {
                malformed += 1;
                first_bad.get_or_insert(lineno);
            }
        }
    }
    check_malformed(path, malformed, total, first_bad)?;
    Ok(edges)
}

pub fn parse_social(path: &Path) -> Result<Vec<(u64, u64)>> {
    parse_social_str(&read(path)?, path)
}

/// Renders events in the log format. `header` lines are emitted as `# ` comments.
pub fn format_events(events: &[EventRecord], header: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(h) = header {
        for l in h.lines() {
            let _ = writeln!(s, "# {l}");
        }
    }
    for e in events {
        let _ = writeln!(s, "{}\t{}\t{}", e.user_id, e.item_id, e.timestamp);
    }
    s
}

pub fn write_events(path: &Path, events: &[EventRecord], header: Option<&str>) -> Result<()> {
    fs::write(path, format_events(events, header)).map_err(|e| Error::io(path, e))
}

pub fn write_social(path: &Path, edges: &[(u64, u64)], header: Option<&str>) -> Result<()> {
    let mut s = String::new();
    if let Some(h) = header {
        for l in h.lines() {
            let _ = writeln!(s, "# {l}");
        }
    }
    for (a, b) in edges {
        let _ = writeln!(s, "{a}\t{b}");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// How [`head_fraction`] orders records before cutting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FractionMode {
    /// Keep the earliest records by timestamp.
    Time,
    /// Keep the leading records in file order.
    Record,
}

impl std::str::FromStr for FractionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Self::Time),
            "record" => Ok(Self::Record),
            _ => Err(Error::config("data.fraction_mode", format!("expected `time` or `record`, got `{s}`"))),
        }
    }
}

/// Keeps the first `fraction` of a log, either by time or by file order.
pub fn head_fraction(events: &[EventRecord], fraction: f64, mode: FractionMode) -> Vec<EventRecord> {
    let keep = ((events.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    match mode {
        FractionMode::Record => events[..keep].to_vec(),
        FractionMode::Time => {
            let mut order: Vec<usize> = (0..events.len()).collect();
            order.sort_by(|&a, &b| events[a].timestamp.total_cmp(&events[b].timestamp));
            let mut kept: Vec<usize> = order[..keep].to_vec();
            kept.sort_unstable();
            kept.into_iter().map(|i| events[i]).collect()
        }
    }
}
