//! Build-order text parsing, rating filter, n-gram features and the
//! JSON-lines corpus format.
//!
//! One entry per line: `<supply> <m:ss> <action>[ ×<k>]`, for example
//! `19 1:58 Queen ×2`. Files may start with `# replay_id: ...` and
//! `# mmr: ...` header comments.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

pub const DEFAULT_MIN_MMR: i64 = 4800;
const MULTIPLIER_MARKS: [&str; 2] = ["×", "x"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BuildOrderError {
    #[error("line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("line {line}: time {time_s}s precedes previous entry at {prev_s}s")]
    Ordering { line: usize, time_s: u32, prev_s: u32 },
    #[error("build order has an empty replay id")]
    EmptyReplayId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildEntry {
    pub supply: u32,
    pub time_s: u32,
    pub action: String,
    pub count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOrder {
    pub replay_id: String,
    pub mmr: Option<i64>,
    pub entries: Vec<BuildEntry>,
}

impl BuildEntry {
    /// Renders as `<supply> <m:ss> <action>[ ×<k>]`.
    pub fn to_line(&self) -> String {
        let clock = format!("{}:{:02}", self.time_s / 60, self.time_s % 60);
        if self.count > 1 {
            format!("{} {} {} ×{}", self.supply, clock, self.action, self.count)
        } else {
            format!("{} {} {}", self.supply, clock, self.action)
        }
    }
}

impl BuildOrder {
    /// Index of the first entry with this action.
    pub fn first(&self, action: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.action == action)
    }

    pub fn contains(&self, action: &str) -> bool {
        self.first(action).is_some()
    }

    /// Total count of an action, optionally only entries at or before `until_s`.
    pub fn count_of(&self, action: &str, until_s: Option<u32>) -> u32 {
        self.entries
            .iter()
            .filter(|e| e.action == action && until_s.is_none_or(|t| e.time_s <= t))
            .map(|e| e.count)
            .sum()
    }

    /// Action tokens with counts expanded (`Queen ×2` gives two tokens).
    pub fn tokens(&self) -> Vec<&str> {
        self.entries
            .iter()
            .flat_map(|e| std::iter::repeat_n(e.action.as_str(), e.count as usize))
            .collect()
    }

    /// Entry lines in build-order table form.
    pub fn render_table(&self) -> String {
        self.entries.iter().map(BuildEntry::to_line).collect::<Vec<_>>().join("\n")
    }
}

// ── parsing ───────────────────────────────────────────────────────────

/// Whitespace-separated tokens with their 1-based character columns.
fn tokens_with_columns(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    for (col, (byte, ch)) in line.char_indices().enumerate() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some((col + 1, byte)),
            (true, Some((c, b))) => {
                out.push((c, &line[b..byte]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some((c, b)) = start {
        out.push((c, &line[b..]));
    }
    out
}

fn parse_clock(tok: &str) -> Option<u32> {
    let (m, s) = tok.split_once(':')?;
    let digits = |x: &str| !x.is_empty() && x.chars().all(|c| c.is_ascii_digit());
    if !digits(m) || m.len() > 2 || !digits(s) || s.len() != 2 {
        return None;
    }
    let (m, s): (u32, u32) = (m.parse().ok()?, s.parse().ok()?);
    (s < 60).then_some(m * 60 + s)
}

/// Splits a trailing `×k` / `x k` multiplier off the action tokens.
type ActionSplit<'a> = (Vec<&'a str>, Option<(usize, &'a str)>);

fn split_multiplier<'a>(rest: &[(usize, &'a str)]) -> ActionSplit<'a> {
    let words: Vec<&str> = rest.iter().map(|(_, t)| *t).collect();
    if let Some(&(col, last)) = rest.last() {
        for mark in MULTIPLIER_MARKS {
            if let Some(num) = last.strip_prefix(mark) {
                if !num.is_empty() && num.chars().all(|c| c.is_ascii_digit()) {
                    return (words[..words.len() - 1].to_vec(), Some((col, num)));
                }
            }
        }
        if rest.len() >= 2 && last.chars().all(|c| c.is_ascii_digit()) {
            let mark = rest[rest.len() - 2].1;
            if MULTIPLIER_MARKS.contains(&mark) {
                return (words[..words.len() - 2].to_vec(), Some((col, last)));
            }
        }
    }
    (words, None)
}

fn parse_line_at(line: &str, lineno: usize) -> Result<BuildEntry, BuildOrderError> {
    let err = |column: usize, msg: String| BuildOrderError::Parse { line: lineno, column, msg };
    let toks = tokens_with_columns(line);
    let end_col = line.chars().count() + 1;
    let (supply_col, supply_tok) = *toks.first().ok_or_else(|| err(1, "missing supply".into()))?;
    let supply: u32 = supply_tok
        .parse()
        .map_err(|_| err(supply_col, format!("supply `{supply_tok}` is not a non-negative integer")))?;
    let (clock_col, clock_tok) = *toks.get(1).ok_or_else(|| err(end_col, "missing time".into()))?;
    let time_s = parse_clock(clock_tok).ok_or_else(|| err(clock_col, format!("malformed clock `{clock_tok}`, expected m:ss")))?;
    if toks.len() < 3 {
        return Err(err(end_col, "missing action".into()));
    }
    let (words, mult) = split_multiplier(&toks[2..]);
    if words.is_empty() {
        return Err(err(toks[2].0, "missing action name before multiplier".into()));
    }
    let count = match mult {
        None => 1,
        Some((col, num)) => match num.parse::<u32>() {
            Ok(k) if k >= 1 => k,
            _ => return Err(err(col, format!("multiplier `{num}` must be a positive integer"))),
        },
    };
    Ok(BuildEntry {
        supply,
        time_s,
        action: words.join(" "),
        count,
    })
}

/// Parses a single `<supply> <m:ss> <action>[ ×<k>]` line.
pub fn parse_line(line: &str) -> Result<BuildEntry, BuildOrderError> {
    parse_line_at(line, 1)
}

fn is_decoration(trimmed: &str) -> bool {
    if trimmed.starts_with('#') {
        return true;
    }
    if trimmed.chars().all(|c| "-=_|+ \t".contains(c)) {
        return true;
    }
    let first = trimmed.split_whitespace().next().unwrap_or("");
    first.eq_ignore_ascii_case("supply")
}

/// Parses every entry line of `text`; blank, comment, header and rule lines are skipped.
pub fn parse_build_order(text: &str, replay_id: &str, mmr: Option<i64>) -> Result<BuildOrder, BuildOrderError> {
    if replay_id.trim().is_empty() {
        return Err(BuildOrderError::EmptyReplayId);
    }
    let mut entries: Vec<BuildEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() || is_decoration(trimmed) {
            continue;
        }
        let entry = parse_line_at(raw, i + 1)?;
        if let Some(prev) = entries.last() {
            if entry.time_s < prev.time_s {
                return Err(BuildOrderError::Ordering {
                    line: i + 1,
                    time_s: entry.time_s,
                    prev_s: prev.time_s,
                });
            }
        }
        entries.push(entry);
    }
    Ok(BuildOrder {
        replay_id: replay_id.trim().to_string(),
        mmr,
        entries,
    })
}

/// Reads `# replay_id:` / `# mmr:` headers, falling back to `default_id`.
pub fn parse_build_order_file(text: &str, default_id: &str) -> Result<BuildOrder, BuildOrderError> {
    let mut replay_id = default_id.to_string();
    let mut mmr = None;
    for (i, raw) in text.lines().enumerate() {
        let Some(body) = raw.trim().strip_prefix('#') else { continue };
        let Some((key, value)) = body.split_once(':') else { continue };
        match key.trim() {
            "replay_id" => replay_id = value.trim().to_string(),
            "mmr" => {
                let v = value.trim();
                mmr = Some(v.parse::<i64>().map_err(|_| BuildOrderError::Parse {
                    line: i + 1,
                    column: raw.find(v).map_or(1, |b| raw[..b].chars().count() + 1),
                    msg: format!("mmr `{v}` is not an integer"),
                })?);
            }
            _ => {}
        }
    }
    parse_build_order(text, &replay_id, mmr)
}

/// Text form that [`parse_build_order_file`] reads back to an equal value.
pub fn serialize(bo: &BuildOrder) -> String {
    let mut out = format!("# replay_id: {}\n", bo.replay_id);
    if let Some(m) = bo.mmr {
        out.push_str(&format!("# mmr: {m}\n"));
    }
    for e in &bo.entries {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    out
}

// ── corpus operations ─────────────────────────────────────────────────

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MmrFilter {
    pub kept: Vec<BuildOrder>,
    pub below_threshold: usize,
    pub unrated: usize,
}

/// Keeps orders with `mmr >= threshold`; orders without a rating are dropped
/// and tallied separately.
pub fn filter_by_mmr(corpus: Vec<BuildOrder>, threshold: i64) -> MmrFilter {
    let mut out = MmrFilter::default();
    for bo in corpus {
        match bo.mmr {
            None => out.unrated += 1,
            Some(m) if m < threshold => out.below_threshold += 1,
            Some(_) => out.kept.push(bo),
        }
    }
    out
}

/// Counts contiguous action n-grams for `n = 1..=n_max` over count-expanded tokens.
pub fn ngram_features(bo: &BuildOrder, n_max: usize) -> BTreeMap<String, usize> {
    let toks = bo.tokens();
    let mut out = BTreeMap::new();
    for n in 1..=n_max.min(toks.len()) {
        for w in toks.windows(n) {
            *out.entry(w.join(" ")).or_insert(0) += 1;
        }
    }
    out
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &[BuildOrder]) -> std::io::Result<()> {
    for bo in corpus {
        serde_json::to_writer(&mut w, bo)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<BuildOrder>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| format!("line {}: {e}", i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}

/// Result of parsing a directory of build-order files.
#[derive(Debug, Default)]
pub struct DirParse {
    /// Successfully parsed orders sorted by replay id.
    pub orders: Vec<BuildOrder>,
    pub failures: Vec<(PathBuf, String)>,
}

/// Parses every regular file in `dir` (one build order per file). Files are
/// parsed in parallel; the result is ordered by replay id.
pub fn parse_dir(dir: &Path) -> std::io::Result<DirParse> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let results = par::map_slice(&paths, |p| {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        fs::read_to_string(p)
            .map_err(|e| e.to_string())
            .and_then(|text| parse_build_order_file(&text, &stem).map_err(|e| e.to_string()))
    });
    let mut out = DirParse::default();
    for (p, r) in paths.into_iter().zip(results) {
        match r {
            Ok(bo) => out.orders.push(bo),
            Err(e) => out.failures.push((p, e)),
        }
    }
    out.orders.sort_by(|a, b| a.replay_id.cmp(&b.replay_id));
    Ok(out)
}
