//! Raw model text to a set of value labels.
//!
//! The expected answer is a bracketed list of quoted strings. The first
//! well-formed list in the text wins; when no list is well formed, quoted
//! strings are collected from anywhere in the text. A failed parse is an
//! outcome, not an error.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::taxonomy::{
    normalize_label, Granularity, LabelMatch, TaxonomyMap, ValueLabel, VALUE_CATEGORIES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    Clean,
    Recovered,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractedList {
    pub items: Vec<String>,
    pub status: ParseStatus,
    /// Well-formed lists found after the one that was used.
    pub ignored_lists: usize,
}

/// Render items as `["a", "b"]`, escaping quotes and backslashes.
pub fn format_list<S: AsRef<str>>(items: &[S]) -> String {
    let quoted: Vec<String> = items
        .iter()
        .map(|s| {
            let escaped = s.as_ref().replace('\\', "\\\\").replace('"', "\\\"");
            format!("\"{escaped}\"")
        })
        .collect();
    format!("[{}]", quoted.join(", "))
}

pub fn extract_list(raw: &str) -> ExtractedList {
    let chars: Vec<char> = raw.chars().collect();
    let mut found: Option<Vec<String>> = None;
    let mut ignored_lists = 0;
    let mut pos = 0;
    while pos < chars.len() {
        if chars[pos] == '[' {
            if let Some((items, end)) = parse_list_at(&chars, pos) {
                if found.is_none() {
                    found = Some(items);
                } else {
                    ignored_lists += 1;
                }
                pos = end;
                continue;
            }
        }
        pos += 1;
    }
    if let Some(items) = found {
        return ExtractedList {
            items,
            status: ParseStatus::Clean,
            ignored_lists,
        };
    }
    let quoted = scan_quoted(&chars);
    if quoted.is_empty() {
        ExtractedList {
            items: Vec::new(),
            status: ParseStatus::Failed,
            ignored_lists: 0,
        }
    } else {
        ExtractedList {
            items: quoted,
            status: ParseStatus::Recovered,
            ignored_lists: 0,
        }
    }
}

fn skip_ws(chars: &[char], mut pos: usize) -> usize {
    while pos < chars.len() && chars[pos].is_whitespace() {
        pos += 1;
    }
    pos
}

/// Parses a quoted string starting at `pos`; returns the unescaped content
/// and the position after the closing quote.
fn parse_quoted(chars: &[char], pos: usize) -> Option<(String, usize)> {
    let quote = *chars.get(pos)?;
    if quote != '"' && quote != '\'' {
        return None;
    }
    let mut out = String::new();
    let mut i = pos + 1;
    while i < chars.len() {
        match chars[i] {
            '\\' => {
                let next = *chars.get(i + 1)?;
                out.push(match next {
                    'n' => '\n',
                    't' => '\t',
                    other => other,
                });
                i += 2;
            }
            '\n' => return None,
            c if c == quote => return Some((out, i + 1)),
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    None
}

/// `[` (item (`,` item)* `,`?)? `]` with items quoted; whitespace anywhere.
fn parse_list_at(chars: &[char], start: usize) -> Option<(Vec<String>, usize)> {
    let mut items = Vec::new();
    let mut pos = skip_ws(chars, start + 1);
    if chars.get(pos) == Some(&']') {
        return Some((items, pos + 1));
    }
    loop {
        let (item, next) = parse_quoted(chars, pos)?;
        items.push(item);
        pos = skip_ws(chars, next);
        match chars.get(pos)? {
            ']' => return Some((items, pos + 1)),
            ',' => {
                pos = skip_ws(chars, pos + 1);
                if chars.get(pos) == Some(&']') {
                    return Some((items, pos + 1));
                }
            }
            _ => return None,
        }
    }
}

/// Every non-empty double-quoted (straight or curly) run in the text. A run
/// may not cross a line break.
fn scan_quoted(chars: &[char]) -> Vec<String> {
    let mut items = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let close = match chars[i] {
            '"' => '"',
            '\u{201C}' => '\u{201D}',
            _ => {
                i += 1;
                continue;
            }
        };
        let rest = &chars[i + 1..];
        match rest.iter().position(|&c| c == close || c == '\n') {
            Some(offset) if rest[offset] == close => {
                let content: String = rest[..offset].iter().collect();
                let content = content.trim();
                if !content.is_empty() {
                    items.push(content.to_string());
                }
                i += offset + 2;
            }
            Some(offset) => i += offset + 2,
            None => break,
        }
    }
    items
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedItem {
    pub raw: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub status: ParseStatus,
    pub labels: BTreeSet<ValueLabel>,
    pub raw_items: Vec<String>,
    /// Raw items that matched a label (duplicates included).
    pub accepted: usize,
    pub dropped: Vec<DroppedItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ParsedPrediction {
    pub fn failed() -> Self {
        Self {
            status: ParseStatus::Failed,
            labels: BTreeSet::new(),
            raw_items: Vec::new(),
            accepted: 0,
            dropped: Vec::new(),
            notes: Vec::new(),
        }
    }
}

/// Names accepted when scoring at `granularity`. At parent granularity leaf
/// names are accepted too and projected.
fn scoring_inventory(taxonomy: &TaxonomyMap, granularity: Granularity) -> Vec<(&'static str, ValueLabel)> {
    match granularity {
        Granularity::Leaf => granularity
            .labels()
            .into_iter()
            .map(|l| (l.name(), l))
            .collect(),
        Granularity::Parent => {
            let categories = Granularity::Parent.labels().into_iter().map(|l| (l.name(), l));
            let leaves = Granularity::Leaf
                .labels()
                .into_iter()
                .map(|l| (l.name(), ValueLabel::Category(taxonomy.project(l))));
            categories.chain(leaves).collect()
        }
    }
}

/// Match raw items against the inventory for `granularity`.
pub fn normalize_prediction(
    raw_items: &[String],
    status: ParseStatus,
    taxonomy: &TaxonomyMap,
    granularity: Granularity,
) -> ParsedPrediction {
    let inventory = scoring_inventory(taxonomy, granularity);
    let names: Vec<&str> = inventory.iter().map(|(n, _)| *n).collect();
    let mut labels = BTreeSet::new();
    let mut dropped = Vec::new();
    let mut accepted = 0;
    for raw in raw_items {
        match normalize_label(raw, &names) {
            LabelMatch::NoMatch(reason) => {
                let reason = if granularity == Granularity::Leaf && VALUE_CATEGORIES.contains(&raw.trim()) {
                    "category label where leaves are scored".to_string()
                } else {
                    reason.to_string()
                };
                dropped.push(DroppedItem {
                    raw: raw.clone(),
                    reason,
                });
            }
            matched => {
                let index = matched.index().expect("matched");
                labels.insert(inventory[index].1);
                accepted += 1;
            }
        }
    }
    ParsedPrediction {
        status,
        labels,
        raw_items: raw_items.to_vec(),
        accepted,
        dropped,
        notes: Vec::new(),
    }
}

/// [`extract_list`] followed by [`normalize_prediction`].
pub fn parse_response(raw: &str, taxonomy: &TaxonomyMap, granularity: Granularity) -> ParsedPrediction {
    let extracted = extract_list(raw);
    let mut parsed = normalize_prediction(&extracted.items, extracted.status, taxonomy, granularity);
    if extracted.ignored_lists > 0 {
        parsed
            .notes
            .push(format!("ignored {} later list(s)", extracted.ignored_lists));
    }
    parsed
}
