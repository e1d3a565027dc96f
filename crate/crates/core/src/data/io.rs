use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{BehaviorType, Event, InteractionSequence, ItemId, UserId};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads `user \t item \t behavior \t timestamp` rows (UTF-8, no header).
/// Rows are grouped by user and stably sorted by timestamp, so ties keep
/// file order. Sequences come back in ascending user order.
pub fn load_tsv(path: &Path) -> Result<Vec<InteractionSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut users: BTreeMap<UserId, Vec<(i64, Event)>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let user = fields[0]
            .trim()
            .parse::<u32>()
            .map_err(|e| parse_err(path, line, format!("bad user id {:?}: {e}", fields[0])))?;
        let item = fields[1]
            .trim()
            .parse::<u32>()
            .map_err(|e| parse_err(path, line, format!("bad item id {:?}: {e}", fields[1])))?;
        let behavior = BehaviorType::parse(fields[2].trim()).map_err(|e| parse_err(path, line, e.to_string()))?;
        let ts = fields[3]
            .trim()
            .parse::<i64>()
            .map_err(|e| parse_err(path, line, format!("bad timestamp {:?}: {e}", fields[3])))?;
        users
            .entry(UserId(user))
            .or_default()
            .push((ts, Event::new(behavior, ItemId(item))));
    }
    Ok(users
        .into_iter()
        .map(|(user, mut rows)| {
            rows.sort_by_key(|(ts, _)| *ts);
            InteractionSequence::new(user, rows.into_iter().map(|(_, e)| e).collect())
        })
        .collect())
}

/// Writes sequences as TSV with the event index as timestamp.
pub fn write_tsv(path: &Path, sequences: &[InteractionSequence]) -> Result<()> {
    let mut out = String::new();
    for s in sequences {
        for (t, e) in s.events.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}", s.user, e.item, e.behavior.code(), t).expect("string write");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl(path: &Path, sequences: &[InteractionSequence]) -> Result<()> {
    let mut out = String::new();
    for s in sequences {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<InteractionSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(path, i + 1, e.to_string())))
        .collect()
}
