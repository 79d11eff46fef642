//! Tolerant parsers for model answers. None of them panic; every failure is
//! a typed [`ParseError`] carrying the offending text.

use std::sync::LazyLock;

use regex::Regex;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no list structure in answer: {raw:?}")]
    UnparseableList { raw: String },
    #[error("no JSON value of the expected shape in answer: {raw:?}")]
    UnparseableJson { raw: String },
    #[error("no YES/NO verdict in answer: {raw:?}")]
    UnparseableVerdict { raw: String },
}

impl ParseError {
    pub fn raw_text(&self) -> &str {
        match self {
            ParseError::UnparseableList { raw }
            | ParseError::UnparseableJson { raw }
            | ParseError::UnparseableVerdict { raw } => raw,
        }
    }
}

const EMPTY_ANSWERS: &[&str] = &["", "[]", "none", "none.", "n/a", "nothing", "empty list", "no elements"];
const MAX_WORDS_PER_ITEM: usize = 6;

static BULLET: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:[-*•+]|\d{1,3}[.)])\s+(.+)$").unwrap());
static VERDICT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap());

fn clean_item(s: &str) -> String {
    s.trim_matches(|c: char| {
        c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '“' | '”' | '‘' | '’' | ',' | ';')
    })
    .to_string()
}

fn push_unique(out: &mut Vec<String>, item: String) {
    if !item.is_empty() && !out.contains(&item) {
        out.push(item);
    }
}

/// Parses a list answer.
///
/// Accepts, in order of preference: a JSON array of scalars anywhere in the
/// text; bulleted or numbered lines (other lines are then ignored); short
/// comma-separated lines without sentence punctuation. `[]`, `none` and empty text give an empty list.
/// Items are stripped of whitespace and quotes; exact duplicates are
/// dropped, keeping the first.
pub fn parse_list(raw: &str) -> Result<Vec<String>, ParseError> {
    let trimmed = raw.trim();
    if EMPTY_ANSWERS.contains(&trimmed.to_lowercase().as_str()) {
        return Ok(Vec::new());
    }
    if let Some(items) = balanced_spans(trimmed, '[', ']').find_map(|span| scalar_array(span)) {
        let mut out = Vec::new();
        for item in items {
            push_unique(&mut out, clean_item(&item));
        }
        return Ok(out);
    }

    let lines: Vec<&str> = trimmed
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("```"))
        .collect();
    let mut out = Vec::new();
    let bullets: Vec<_> = lines.iter().filter_map(|l| BULLET.captures(l)).collect();
    if !bullets.is_empty() {
        for cap in bullets {
            push_unique(&mut out, clean_item(&cap[1]));
        }
        return Ok(out);
    }
    let mut any_item_line = false;
    for line in lines {
        if line.ends_with(['.', '!', '?', ':']) {
            continue;
        }
        let parts: Vec<&str> = line.split([',', ';']).collect();
        if parts
            .iter()
            .all(|p| !p.trim().is_empty() && p.split_whitespace().count() <= MAX_WORDS_PER_ITEM)
        {
            any_item_line = true;
            for p in parts {
                push_unique(&mut out, clean_item(p));
            }
        }
    }
    if any_item_line {
        Ok(out)
    } else {
        Err(ParseError::UnparseableList { raw: raw.to_string() })
    }
}

fn scalar_array(span: &str) -> Option<Vec<String>> {
    let Ok(Value::Array(items)) = serde_json::from_str::<Value>(span) else {
        return None;
    };
    items
        .into_iter()
        .map(|v| match v {
            Value::String(s) => Some(s),
            Value::Number(n) => Some(n.to_string()),
            Value::Bool(b) => Some(b.to_string()),
            _ => None,
        })
        .collect()
}

/// The first balanced top-level JSON object in `raw`, parsed. Surrounding
/// prose and code fences are ignored; key order is preserved.
pub fn parse_json_object(raw: &str) -> Result<Map<String, Value>, ParseError> {
    balanced_spans(raw, '{', '}')
        .find_map(|span| match serde_json::from_str::<Value>(span) {
            Ok(Value::Object(map)) => Some(map),
            _ => None,
        })
        .ok_or_else(|| ParseError::UnparseableJson { raw: raw.to_string() })
}

/// The first balanced JSON array in `raw` whose elements are all arrays of
/// strings. Used for synonym groups.
pub fn parse_string_groups(raw: &str) -> Result<Vec<Vec<String>>, ParseError> {
    balanced_spans(raw, '[', ']')
        .find_map(|span| serde_json::from_str::<Vec<Vec<String>>>(span).ok())
        .ok_or_else(|| ParseError::UnparseableJson { raw: raw.to_string() })
}

/// The last standalone `YES` or `NO` token, case-insensitive.
pub fn parse_verdict(raw: &str) -> Result<bool, ParseError> {
    VERDICT
        .find_iter(raw)
        .last()
        .map(|m| m.as_str().eq_ignore_ascii_case("yes"))
        .ok_or_else(|| ParseError::UnparseableVerdict { raw: raw.to_string() })
}

/// Candidate substrings that start at an `open` bracket and end at its
/// matching `close`, skipping brackets inside JSON strings. Yields one span
/// per opening bracket that has a match, left to right.
fn balanced_spans(text: &str, open: char, close: char) -> impl Iterator<Item = &str> + '_ {
    text.char_indices()
        .filter(move |&(_, c)| c == open)
        .filter_map(move |(start, _)| {
            let mut depth = 0usize;
            let mut in_string = false;
            let mut escaped = false;
            for (i, c) in text[start..].char_indices() {
                if in_string {
                    if escaped {
                        escaped = false;
                    } else if c == '\\' {
                        escaped = true;
                    } else if c == '"' {
                        in_string = false;
                    }
                    continue;
                }
                if c == '"' {
                    in_string = true;
                } else if c == open {
                    depth += 1;
                } else if c == close {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&text[start..start + i + c.len_utf8()]);
                    }
                }
            }
            None
        })
}
