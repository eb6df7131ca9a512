use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One interaction: `user` consumed `item` (of `category`) at `timestamp`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub user: u64,
    pub item: u64,
    pub category: u64,
    pub timestamp: i64,
}

/// Raw corpus of timestamped events, in input order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub events: Vec<Event>,
}

impl InteractionLog {
    pub fn new(events: Vec<Event>) -> Self {
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events ordered by `(user, timestamp)`; ties keep input order.
    pub fn sorted(&self) -> Vec<Event> {
        let mut events = self.events.clone();
        events.sort_by_key(|e| (e.user, e.timestamp));
        events
    }

    pub fn user_count(&self) -> usize {
        let mut users: Vec<u64> = self.events.iter().map(|e| e.user).collect();
        users.sort_unstable();
        users.dedup();
        users.len()
    }

    pub fn item_count(&self) -> usize {
        let mut items: Vec<u64> = self.events.iter().map(|e| e.item).collect();
        items.sort_unstable();
        items.dedup();
        items.len()
    }
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, name: &str, path: &Path, line: usize) -> Result<T> {
    let raw = field.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("missing {name} field"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("invalid {name} {raw:?}"),
    })
}

/// Parses one tab-separated row. Returns the event and the trailing fields.
pub(crate) fn parse_row<'a>(text: &'a str, path: &Path, line: usize) -> Result<(Event, Vec<&'a str>)> {
    let mut fields = text.split('\t');
    let user = parse_field(fields.next(), "user_id", path, line)?;
    let item = parse_field(fields.next(), "item_id", path, line)?;
    let category = parse_field(fields.next(), "category_id", path, line)?;
    let timestamp = parse_field(fields.next(), "timestamp", path, line)?;
    Ok((
        Event {
            user,
            item,
            category,
            timestamp,
        },
        fields.collect(),
    ))
}

/// A first line whose timestamp field does not parse is a header.
pub(crate) fn is_header(text: &str) -> bool {
    text.split('\t').nth(3).is_none_or(|t| t.trim().parse::<i64>().is_err())
}

/// Reads a tab-separated `user_id item_id category_id timestamp` file.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let number = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if number == 1 && is_header(&line) {
            continue;
        }
        let (event, rest) = parse_row(&line, path, number)?;
        if !rest.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: number,
                reason: format!("expected 4 fields, found {}", 4 + rest.len()),
            });
        }
        events.push(event);
    }
    if events.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    Ok(InteractionLog { events })
}

pub const LOG_HEADER: &str = "user_id\titem_id\tcategory_id\ttimestamp";

pub fn write_interactions<W: Write>(log: &InteractionLog, w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{LOG_HEADER}")?;
    for e in &log.events {
        writeln!(w, "{}\t{}\t{}\t{}", e.user, e.item, e.category, e.timestamp)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_interactions(log: &InteractionLog, path: &Path) -> Result<()> {
    write_interactions(log, File::create(path)?)
}

/// Iteratively drops users and items with fewer than `k` events until
/// nothing changes.
pub fn apply_k_core(log: &InteractionLog, k: usize) -> InteractionLog {
    let mut events = log.events.clone();
    loop {
        let mut users: HashMap<u64, usize> = HashMap::new();
        let mut items: HashMap<u64, usize> = HashMap::new();
        for e in &events {
            *users.entry(e.user).or_default() += 1;
            *items.entry(e.item).or_default() += 1;
        }
        let before = events.len();
        events.retain(|e| users[&e.user] >= k && items[&e.item] >= k);
        if events.len() == before {
            return InteractionLog { events };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: u64, item: u64) -> Event {
        Event {
            user,
            item,
            category: 0,
            timestamp: 0,
        }
    }

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_rows() {
        let f = write_tmp("1\t10\t3\t100\n1\t11\t3\t101\n2\t10\t3\t50\n");
        let log = load_interactions(f.path()).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.events[2], Event { user: 2, item: 10, category: 3, timestamp: 50 });
    }

    #[test]
    fn header_is_skipped() {
        let f = write_tmp(&format!("{LOG_HEADER}\n1\t10\t3\t100\n"));
        assert_eq!(load_interactions(f.path()).unwrap().len(), 1);
    }

    #[test]
    fn bad_timestamp_cites_line() {
        let f = write_tmp("1\t10\t3\t100\n1\t11\t3\tlater\n");
        match load_interactions(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("");
        assert!(matches!(load_interactions(f.path()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn write_then_load_round_trips() {
        let log = InteractionLog::new(vec![
            Event { user: 3, item: 1, category: 2, timestamp: -5 },
            Event { user: 1, item: 9, category: 0, timestamp: 7 },
        ]);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_interactions(&log, f.path()).unwrap();
        assert_eq!(load_interactions(f.path()).unwrap(), log);
    }

    #[test]
    fn sorted_breaks_ties_by_input_order() {
        let mut a = ev(1, 5);
        a.timestamp = 3;
        let mut b = ev(1, 6);
        b.timestamp = 3;
        let mut c = ev(0, 7);
        c.timestamp = 9;
        let log = InteractionLog::new(vec![a, b, c]);
        assert_eq!(log.sorted(), vec![c, a, b]);
    }

    #[test]
    fn sparse_user_is_removed() {
        let mut events = Vec::new();
        for u in 0..10 {
            for i in 0..10 {
                events.push(ev(u, i));
            }
        }
        for i in 0..5 {
            events.push(ev(99, i));
        }
        let out = apply_k_core(&InteractionLog::new(events), 10);
        assert!(out.events.iter().all(|e| e.user != 99));
        assert_eq!(out.len(), 100);
    }

    #[test]
    fn dense_log_is_unchanged() {
        let events: Vec<Event> = (0..4).flat_map(|u| (0..4).map(move |i| ev(u, i))).collect();
        let log = InteractionLog::new(events);
        assert_eq!(apply_k_core(&log, 4), log);
    }

    /// Removes one offending user or item at a time until none remain.
    fn brute_force_core(events: &[Event], k: usize) -> Vec<Event> {
        let mut events = events.to_vec();
        loop {
            let count = |f: &dyn Fn(&Event) -> bool| events.iter().filter(|e| f(e)).count();
            let bad_user = events.iter().map(|e| e.user).find(|&u| count(&|e: &Event| e.user == u) < k);
            if let Some(u) = bad_user {
                events.retain(|e| e.user != u);
                continue;
            }
            let bad_item = events.iter().map(|e| e.item).find(|&i| count(&|e: &Event| e.item == i) < k);
            match bad_item {
                Some(i) => events.retain(|e| e.item != i),
                None => return events,
            }
        }
    }

    #[test]
    fn chain_removal_matches_brute_force() {
        // Users 0 and 1 hold 10 events over items 0..10. User 2 has items
        // 0..9 plus item 99, which only user 2 touches, so dropping item 99
        // pushes user 2 below the threshold on the next pass.
        let mut events = Vec::new();
        for u in 0..2 {
            for i in 0..10 {
                events.push(ev(u, i));
            }
        }
        for i in 0..9 {
            events.push(ev(2, i));
        }
        events.push(ev(2, 99));
        let mut fill = Vec::new();
        for u in 10..20 {
            for i in 0..10 {
                fill.push(ev(u, i));
            }
        }
        events.extend(fill);
        let log = InteractionLog::new(events.clone());
        let out = apply_k_core(&log, 10);
        assert!(out.events.iter().all(|e| e.user != 2 && e.item != 99));
        assert_eq!(out.events, brute_force_core(&events, 10));
    }
}
