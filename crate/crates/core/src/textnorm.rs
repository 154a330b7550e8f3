//! Text normalization applied before every text metric.
//!
//! [`normalize`] produces the flat form used by CER/WER: NFKC, canonical
//! quotes/dashes/bullets, every whitespace character turned into a space,
//! trimmed, and internal runs collapsed. [`normalize_2d`] keeps line breaks and
//! intra-line spacing so layout differences still count.
//!
//! Case is never folded.

use std::collections::HashMap;
use std::sync::OnceLock;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

const BUILTIN_TABLE: &str = include_str!("../assets/canon_table.tsv");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("replacement for U+{key:04X} contains mapped character U+{inner:04X}")]
    Unstable { key: u32, inner: u32 },
}

/// Codepoint to replacement map, loaded from the versioned `canon_table.tsv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonTable {
    version: u32,
    map: HashMap<char, String>,
}

impl CanonTable {
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let mut version = None;
        let mut map = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let (key, value) = raw.split_once('\t').ok_or_else(|| TableError::Syntax {
                line,
                message: "expected <key>\\t<value>".into(),
            })?;
            if key == "version" {
                version = Some(value.trim().parse().map_err(|_| TableError::Syntax {
                    line,
                    message: format!("bad version {value:?}"),
                })?);
                continue;
            }
            let hex = key.strip_prefix("U+").ok_or_else(|| TableError::Syntax {
                line,
                message: format!("bad codepoint {key:?}"),
            })?;
            let ch = u32::from_str_radix(hex, 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| TableError::Syntax {
                    line,
                    message: format!("bad codepoint {key:?}"),
                })?;
            map.insert(ch, value.to_string());
        }
        for (k, v) in &map {
            if let Some(inner) = v.chars().find(|c| map.contains_key(c)) {
                return Err(TableError::Unstable {
                    key: *k as u32,
                    inner: inner as u32,
                });
            }
        }
        let version = version.ok_or(TableError::Syntax {
            line: 0,
            message: "missing version line".into(),
        })?;
        Ok(Self { version, map })
    }

    /// The table shipped with the crate.
    pub fn builtin() -> &'static CanonTable {
        static TABLE: OnceLock<CanonTable> = OnceLock::new();
        TABLE.get_or_init(|| CanonTable::parse(BUILTIN_TABLE).expect("builtin canon table"))
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, c: char) -> Option<&str> {
        self.map.get(&c).map(String::as_str)
    }
}

/// Per-character mapping shared by both modes. Line breaks become `'\n'` in
/// 2D mode and spaces otherwise; other whitespace becomes a space; remaining
/// control characters are dropped.
fn map_chars(input: &str, table: &CanonTable, keep_lines: bool, out: &mut String) {
    let mut chars = input.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\r' || c == '\n' {
            if c == '\r' && chars.peek() == Some(&'\n') {
                chars.next();
            }
            out.push(if keep_lines { '\n' } else { ' ' });
        } else if c.is_whitespace() {
            out.push(' ');
        } else if c.is_control() {
            continue;
        } else if let Some(rep) = table.get(c) {
            out.push_str(rep);
        } else {
            out.push(c);
        }
    }
}

fn canonical(s: &str, table: &CanonTable, keep_lines: bool) -> String {
    let mut pre = String::with_capacity(s.len());
    map_chars(s, table, keep_lines, &mut pre);
    let composed: String = pre.nfkc().collect();
    let mut post = String::with_capacity(composed.len());
    map_chars(&composed, table, keep_lines, &mut post);
    post
}

/// Flat normalization with a caller-supplied table.
pub fn normalize_with(s: &str, table: &CanonTable) -> String {
    let canon = canonical(s, table, false);
    let mut out = String::with_capacity(canon.len());
    for word in canon.split(' ').filter(|w| !w.is_empty()) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Layout-preserving normalization with a caller-supplied table.
pub fn normalize_2d_with(s: &str, table: &CanonTable) -> String {
    let canon = canonical(s, table, true);
    let mut rows: Vec<&str> = canon.split('\n').map(|r| r.trim_end_matches(' ')).collect();
    while rows.last().is_some_and(|r| r.is_empty()) {
        rows.pop();
    }
    rows.join("\n")
}

pub fn normalize(s: &str) -> String {
    normalize_with(s, CanonTable::builtin())
}

pub fn normalize_2d(s: &str) -> String {
    normalize_2d_with(s, CanonTable::builtin())
}
