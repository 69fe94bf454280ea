//! Closed label inventories and the leaf-to-category value projection.
//!
//! Sentiments, emotions, topics and the 54 value leaves are fixed lists. The
//! mapping from leaves onto the 20 refined value categories is read from a
//! versioned tab-separated file (`leaf<TAB>parent`); a copy ships with the
//! crate and is used unless another path is configured. Loading checks that
//! the map is total over the leaves and surjective onto the categories.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const SENTIMENTS: [&str; 5] = [
    "Very negative",
    "Somewhat negative",
    "Neutral",
    "Somewhat positive",
    "Very positive",
];

pub const EMOTIONS: [&str; 27] = [
    "admiration",
    "amusement",
    "anger",
    "annoyance",
    "approval",
    "caring",
    "confusion",
    "curiosity",
    "desire",
    "disappointment",
    "disapproval",
    "disgust",
    "embarrassment",
    "excitement",
    "fear",
    "gratitude",
    "grief",
    "joy",
    "love",
    "nervousness",
    "optimism",
    "pride",
    "realization",
    "relief",
    "remorse",
    "sadness",
    "surprise",
];

pub const TOPICS: [&str; 6] = [
    "Municipality and residents engagement in the energy sector",
    "Energy storage and supplying energy in The Netherlands",
    "Wind and solar energy",
    "Market Determination Dynamics",
    "Landscapes and windmills tourism",
    "Hydrogen energy pipeline networks",
];

pub const VALUE_LEAVES: [&str; 54] = [
    "Be creative",
    "Be curious",
    "Have freedom of thought",
    "Be choosing own goals",
    "Be independent",
    "Have freedom of action",
    "Have privacy",
    "Have an exciting life",
    "Have a varied life",
    "Be daring",
    "Have pleasure",
    "Be ambitious",
    "Have success",
    "Be capable",
    "Be intellectual",
    "Be courageous",
    "Have influence",
    "Have the right to command",
    "Have wealth",
    "Have social recognition",
    "Have a good reputation",
    "Have a sense of belonging",
    "Have good health",
    "Have no debts",
    "Be neat and tidy",
    "Have a comfortable life",
    "Have a safe country",
    "Have a stable society",
    "Be respecting traditions",
    "Be holding religious faith",
    "Be compliant",
    "Be self-disciplined",
    "Be behaving properly",
    "Be polite",
    "Be honoring elders",
    "Be humble",
    "Have life accepted as is",
    "Be helpful",
    "Be honest",
    "Be forgiving",
    "Have the own family secured",
    "Be loving",
    "Be responsible",
    "Have loyalty towards friends",
    "Have equality",
    "Be just",
    "Have a world at peace",
    "Be protecting the environment",
    "Have harmony with nature",
    "Have a world of beauty",
    "Be broadminded",
    "Have the wisdom to accept others",
    "Be logical",
    "Have an objective view",
];

pub const VALUE_CATEGORIES: [&str; 20] = [
    "Self-direction: thought",
    "Self-direction: action",
    "Stimulation",
    "Hedonism",
    "Achievement",
    "Power: dominance",
    "Power: resources",
    "Face",
    "Security: personal",
    "Security: societal",
    "Tradition",
    "Conformity: rules",
    "Conformity: interpersonal",
    "Humility",
    "Benevolence: caring",
    "Benevolence: dependability",
    "Universalism: concern",
    "Universalism: nature",
    "Universalism: tolerance",
    "Universalism: objectivity",
];

/// Shipped leaf-to-category table.
pub const BUILTIN_TAXONOMY: &str = include_str!("../data/value_taxonomy_v1.tsv");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy line {line}: expected `leaf<TAB>parent`")]
    Malformed { line: usize },
    #[error("taxonomy line {line}: unknown value leaf {leaf:?}")]
    UnknownLeaf { line: usize, leaf: String },
    #[error("taxonomy line {line}: unknown value category {parent:?}")]
    UnknownCategory { line: usize, parent: String },
    #[error("taxonomy line {line}: leaf {leaf:?} mapped twice")]
    DuplicateLeaf { line: usize, leaf: String },
    #[error("taxonomy is not total: {0} leaves unmapped (first: {1:?})")]
    NotTotal(usize, String),
    #[error("taxonomy is not surjective: categories without leaves: {0:?}")]
    NotSurjective(Vec<String>),
    #[error("unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("reading taxonomy file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

macro_rules! closed_label {
    ($(#[$meta:meta])* $name:ident, $inventory:ident, $kind:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(u8);

        impl $name {
            pub const KIND: &'static str = $kind;

            pub fn name(self) -> &'static str {
                $inventory[self.0 as usize]
            }

            pub fn index(self) -> usize {
                self.0 as usize
            }

            pub fn from_index(index: usize) -> Option<Self> {
                (index < $inventory.len()).then(|| Self(index as u8))
            }

            /// Exact lookup by canonical name.
            pub fn from_name(name: &str) -> Option<Self> {
                $inventory
                    .iter()
                    .position(|candidate| *candidate == name)
                    .map(|i| Self(i as u8))
            }

            pub fn parse(name: &str) -> Result<Self, TaxonomyError> {
                Self::from_name(name).ok_or_else(|| TaxonomyError::UnknownLabel {
                    kind: $kind,
                    label: name.to_string(),
                })
            }

            pub fn all() -> impl Iterator<Item = Self> {
                (0..$inventory.len()).map(|i| Self(i as u8))
            }

            pub fn inventory() -> &'static [&'static str] {
                &$inventory
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(deserializer)?;
                Self::parse(&raw).map_err(serde::de::Error::custom)
            }
        }
    };
}

closed_label!(
    /// Point on the five-step polarity scale; ordered from very negative to very positive.
    Sentiment,
    SENTIMENTS,
    "sentiment"
);
closed_label!(Emotion, EMOTIONS, "emotion");
closed_label!(Topic, TOPICS, "topic");
closed_label!(ValueLeaf, VALUE_LEAVES, "value leaf");
closed_label!(ValueCategory, VALUE_CATEGORIES, "value category");

/// A value label at either granularity. Gold files may carry leaves or
/// categories; prompts may offer either list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ValueLabel {
    Leaf(ValueLeaf),
    Category(ValueCategory),
}

impl ValueLabel {
    pub fn name(self) -> &'static str {
        match self {
            ValueLabel::Leaf(leaf) => leaf.name(),
            ValueLabel::Category(category) => category.name(),
        }
    }

    /// Leaves are tried first; the two inventories share no names.
    pub fn from_name(name: &str) -> Option<Self> {
        ValueLeaf::from_name(name)
            .map(ValueLabel::Leaf)
            .or_else(|| ValueCategory::from_name(name).map(ValueLabel::Category))
    }

    pub fn granularity(self) -> Granularity {
        match self {
            ValueLabel::Leaf(_) => Granularity::Leaf,
            ValueLabel::Category(_) => Granularity::Parent,
        }
    }
}

impl fmt::Display for ValueLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for ValueLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ValueLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        ValueLabel::from_name(&raw).ok_or_else(|| {
            serde::de::Error::custom(TaxonomyError::UnknownLabel {
                kind: "value",
                label: raw,
            })
        })
    }
}

/// Granularity of value labels: the 54 leaves or the 20 parent categories.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Leaf,
    #[default]
    Parent,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Leaf => "leaf",
            Granularity::Parent => "parent",
        }
    }

    /// Candidate names offered at this granularity, in inventory order.
    pub fn inventory(self) -> &'static [&'static str] {
        match self {
            Granularity::Leaf => &VALUE_LEAVES,
            Granularity::Parent => &VALUE_CATEGORIES,
        }
    }

    pub fn labels(self) -> Vec<ValueLabel> {
        match self {
            Granularity::Leaf => ValueLeaf::all().map(ValueLabel::Leaf).collect(),
            Granularity::Parent => ValueCategory::all().map(ValueLabel::Category).collect(),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Leaf-to-category table, total and surjective once constructed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaxonomyMap {
    parents: [ValueCategory; 54],
}

impl TaxonomyMap {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TAXONOMY).expect("shipped taxonomy file is valid")
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, TaxonomyError> {
        let mut parents: [Option<ValueCategory>; 54] = [None; 54];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let (leaf, parent) = trimmed
                .split_once('\t')
                .ok_or(TaxonomyError::Malformed { line })?;
            let (leaf, parent) = (leaf.trim(), parent.trim());
            let leaf_label = ValueLeaf::from_name(leaf).ok_or_else(|| TaxonomyError::UnknownLeaf {
                line,
                leaf: leaf.to_string(),
            })?;
            let category =
                ValueCategory::from_name(parent).ok_or_else(|| TaxonomyError::UnknownCategory {
                    line,
                    parent: parent.to_string(),
                })?;
            let slot = &mut parents[leaf_label.index()];
            if slot.is_some() {
                return Err(TaxonomyError::DuplicateLeaf {
                    line,
                    leaf: leaf.to_string(),
                });
            }
            *slot = Some(category);
        }

        let missing: Vec<&str> = ValueLeaf::all()
            .filter(|leaf| parents[leaf.index()].is_none())
            .map(ValueLeaf::name)
            .collect();
        if let Some(first) = missing.first() {
            return Err(TaxonomyError::NotTotal(missing.len(), first.to_string()));
        }
        let parents = parents.map(|p| p.expect("checked total"));

        let covered: BTreeSet<ValueCategory> = parents.iter().copied().collect();
        let uncovered: Vec<String> = ValueCategory::all()
            .filter(|c| !covered.contains(c))
            .map(|c| c.name().to_string())
            .collect();
        if !uncovered.is_empty() {
            return Err(TaxonomyError::NotSurjective(uncovered));
        }
        Ok(Self { parents })
    }

    pub fn parent_of(&self, leaf: ValueLeaf) -> ValueCategory {
        self.parents[leaf.index()]
    }

    pub fn project(&self, label: ValueLabel) -> ValueCategory {
        match label {
            ValueLabel::Leaf(leaf) => self.parent_of(leaf),
            ValueLabel::Category(category) => category,
        }
    }

    pub fn project_to_parents<I>(&self, labels: I) -> BTreeSet<ValueCategory>
    where
        I: IntoIterator<Item = ValueLabel>,
    {
        labels.into_iter().map(|l| self.project(l)).collect()
    }

    /// Express `labels` at `granularity`. Categories cannot be lowered to
    /// leaves, so at leaf granularity they pass through unchanged.
    pub fn at_granularity<I>(&self, labels: I, granularity: Granularity) -> BTreeSet<ValueLabel>
    where
        I: IntoIterator<Item = ValueLabel>,
    {
        match granularity {
            Granularity::Leaf => labels.into_iter().collect(),
            Granularity::Parent => labels
                .into_iter()
                .map(|l| ValueLabel::Category(self.project(l)))
                .collect(),
        }
    }

    pub fn children(&self, category: ValueCategory) -> impl Iterator<Item = ValueLeaf> + '_ {
        ValueLeaf::all().filter(move |leaf| self.parent_of(*leaf) == category)
    }
}

impl Default for TaxonomyMap {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Outcome of matching free text against a closed inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelMatch {
    Exact(usize),
    Fuzzy { index: usize, distance: usize },
    NoMatch(NoMatchReason),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NoMatchReason {
    Empty,
    TooFar,
    /// Several candidates at the same minimal distance.
    Ambiguous(Vec<usize>),
}

impl LabelMatch {
    pub fn index(&self) -> Option<usize> {
        match self {
            LabelMatch::Exact(index) | LabelMatch::Fuzzy { index, .. } => Some(*index),
            LabelMatch::NoMatch(_) => None,
        }
    }
}

impl fmt::Display for NoMatchReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoMatchReason::Empty => f.write_str("empty label"),
            NoMatchReason::TooFar => write!(f, "no label within {MAX_EDIT_DISTANCE} edits"),
            NoMatchReason::Ambiguous(candidates) => {
                write!(f, "ambiguous between {} labels", candidates.len())
            }
        }
    }
}

pub const MAX_EDIT_DISTANCE: usize = 2;

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_key(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Match `raw` against `inventory`: exact after case and whitespace
/// normalization, otherwise the unique candidate within
/// [`MAX_EDIT_DISTANCE`] edits.
pub fn normalize_label<S: AsRef<str>>(raw: &str, inventory: &[S]) -> LabelMatch {
    let key = normalize_key(raw);
    if key.is_empty() {
        return LabelMatch::NoMatch(NoMatchReason::Empty);
    }
    let keys: Vec<String> = inventory.iter().map(|s| normalize_key(s.as_ref())).collect();
    if let Some(index) = keys.iter().position(|k| *k == key) {
        return LabelMatch::Exact(index);
    }

    let mut best = usize::MAX;
    let mut winners = Vec::new();
    for (index, candidate) in keys.iter().enumerate() {
        let distance = strsim::levenshtein(&key, candidate);
        if distance > MAX_EDIT_DISTANCE {
            continue;
        }
        if distance < best {
            best = distance;
            winners.clear();
        }
        if distance == best {
            winners.push(index);
        }
    }
    match winners.as_slice() {
        [] => LabelMatch::NoMatch(NoMatchReason::TooFar),
        [index] => LabelMatch::Fuzzy {
            index: *index,
            distance: best,
        },
        _ => LabelMatch::NoMatch(NoMatchReason::Ambiguous(winners)),
    }
}
