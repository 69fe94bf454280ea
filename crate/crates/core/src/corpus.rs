//! Justification corpus and per-annotator SEAT annotation files.
//!
//! Both files are line-delimited JSON. A file is validated as a whole: any
//! bad line fails the load and nothing is returned.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taxonomy::{Emotion, Sentiment, Topic, ValueLabel};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: justification {id:?} has empty text")]
    EmptyText { line: usize, id: String },
    #[error("line {line}: duplicate record for annotator {annotator:?} on justification {justification:?}")]
    DuplicateRecord {
        line: usize,
        annotator: String,
        justification: String,
    },
    #[error("line {line} ({annotator}/{justification}): unknown {kind} label {label:?}")]
    UnknownLabel {
        line: usize,
        annotator: String,
        justification: String,
        kind: &'static str,
        label: String,
    },
    #[error("line {line} ({annotator}/{justification}): span [{start}, {end}) out of bounds for text of {len} characters")]
    SpanOutOfBounds {
        line: usize,
        annotator: String,
        justification: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("line {line} ({annotator}/{justification}): span [{start}, {end}) text {text:?} does not match the justification")]
    SpanTextMismatch {
        line: usize,
        annotator: String,
        justification: String,
        start: usize,
        end: usize,
        text: String,
    },
    #[error("line {line}: justification {justification:?} is not in the corpus")]
    DanglingJustification { line: usize, justification: String },
    #[error("line {line}: annotator {annotator:?} is not in the profile list")]
    UnknownAnnotator { line: usize, annotator: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Justification {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub id: String,
    #[serde(default)]
    pub notes: String,
}

impl AnnotatorProfile {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            notes: String::new(),
        }
    }
}

/// Half-open character range `[start, end)` into a justification text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl ArgumentSpan {
    /// Builds the span from `text`, or `None` when the range is invalid.
    pub fn from_text(text: &str, start: usize, end: usize) -> Option<Self> {
        if start >= end || end > text.chars().count() {
            return None;
        }
        Some(Self {
            start,
            end,
            text: char_slice(text, start, end),
        })
    }
}

pub(crate) fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

/// One annotator's annotation of one justification.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeatRecord {
    pub annotator_id: String,
    pub justification_id: String,
    pub sentiment: Option<Sentiment>,
    pub emotions: BTreeSet<Emotion>,
    /// Empty means the text carries no argument.
    pub argument: Vec<ArgumentSpan>,
    pub topics: BTreeSet<Topic>,
    pub values: BTreeSet<ValueLabel>,
}

impl SeatRecord {
    pub fn empty(annotator_id: impl Into<String>, justification_id: impl Into<String>) -> Self {
        Self {
            annotator_id: annotator_id.into(),
            justification_id: justification_id.into(),
            sentiment: None,
            emotions: BTreeSet::new(),
            argument: Vec::new(),
            topics: BTreeSet::new(),
            values: BTreeSet::new(),
        }
    }
}

/// Justifications sorted by id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    justifications: Vec<Justification>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(mut justifications: Vec<Justification>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for (i, j) in justifications.iter().enumerate() {
            if !seen.insert(j.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    line: i + 1,
                    id: j.id.clone(),
                });
            }
            if j.text.trim().is_empty() {
                return Err(CorpusError::EmptyText {
                    line: i + 1,
                    id: j.id.clone(),
                });
            }
        }
        justifications.sort_by(|a, b| a.id.cmp(&b.id));
        let by_id = justifications
            .iter()
            .enumerate()
            .map(|(i, j)| (j.id.clone(), i))
            .collect();
        Ok(Self {
            justifications,
            by_id,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::parse(&read(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut items = Vec::new();
        let mut seen = BTreeSet::new();
        for (line, raw) in jsonl_lines(text) {
            let j: Justification = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
                line,
                message: e.to_string(),
            })?;
            if !seen.insert(j.id.clone()) {
                return Err(CorpusError::DuplicateId { line, id: j.id });
            }
            if j.text.trim().is_empty() {
                return Err(CorpusError::EmptyText { line, id: j.id });
            }
            items.push(j);
        }
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.justifications.len()
    }

    pub fn is_empty(&self) -> bool {
        self.justifications.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Justification> {
        self.by_id.get(id).map(|&i| &self.justifications[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Justification> {
        self.justifications.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.justifications.iter().map(|j| j.id.as_str())
    }

    /// Canonical serialization: one compact JSON object per line, sorted by id.
    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.justifications)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

pub fn load_profiles(path: &Path) -> Result<Vec<AnnotatorProfile>, CorpusError> {
    parse_profiles(&read(path)?)
}

pub fn parse_profiles(text: &str) -> Result<Vec<AnnotatorProfile>, CorpusError> {
    let mut profiles: Vec<AnnotatorProfile> = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, raw) in jsonl_lines(text) {
        let p: AnnotatorProfile = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(p.id.clone()) {
            return Err(CorpusError::DuplicateId { line, id: p.id });
        }
        profiles.push(p);
    }
    profiles.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(profiles)
}

/// Validated SEAT records keyed by (annotator, justification).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationSet {
    records: BTreeMap<(String, String), SeatRecord>,
    annotators: Vec<AnnotatorProfile>,
    corpus_ref: String,
}

#[derive(Deserialize)]
struct RawSpan {
    start: usize,
    end: usize,
    text: String,
}

#[derive(Deserialize)]
struct RawSeatRecord {
    annotator_id: String,
    justification_id: String,
    #[serde(default)]
    sentiment: Option<String>,
    #[serde(default)]
    emotions: Vec<String>,
    #[serde(default)]
    argument: Vec<RawSpan>,
    #[serde(default)]
    topics: Vec<String>,
    #[serde(default)]
    values: Vec<String>,
}

impl AnnotationSet {
    /// Builds a set from already-typed records, checking the same invariants
    /// as [`AnnotationSet::parse`]. With `profiles == None` the annotator list
    /// is taken from the records.
    pub fn new(
        records: Vec<SeatRecord>,
        corpus: &Corpus,
        profiles: Option<Vec<AnnotatorProfile>>,
    ) -> Result<Self, CorpusError> {
        let mut builder = Builder::new(corpus, profiles);
        for (i, record) in records.into_iter().enumerate() {
            builder.push(i + 1, record)?;
        }
        Ok(builder.finish())
    }

    pub fn load(
        path: &Path,
        corpus: &Corpus,
        profiles: Option<Vec<AnnotatorProfile>>,
    ) -> Result<Self, CorpusError> {
        Self::parse(&read(path)?, corpus, profiles)
    }

    pub fn parse(
        text: &str,
        corpus: &Corpus,
        profiles: Option<Vec<AnnotatorProfile>>,
    ) -> Result<Self, CorpusError> {
        let mut builder = Builder::new(corpus, profiles);
        for (line, raw) in jsonl_lines(text) {
            let raw: RawSeatRecord = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
                line,
                message: e.to_string(),
            })?;
            let record = typed_record(line, raw)?;
            builder.push(line, record)?;
        }
        Ok(builder.finish())
    }

    pub fn get(&self, annotator_id: &str, justification_id: &str) -> Option<&SeatRecord> {
        self.records
            .get(&(annotator_id.to_string(), justification_id.to_string()))
    }

    pub fn records(&self) -> impl Iterator<Item = &SeatRecord> {
        self.records.values()
    }

    pub fn records_for<'a>(&'a self, annotator_id: &'a str) -> impl Iterator<Item = &'a SeatRecord> {
        self.records
            .values()
            .filter(move |r| r.annotator_id == annotator_id)
    }

    pub fn annotators(&self) -> &[AnnotatorProfile] {
        &self.annotators
    }

    pub fn annotator_ids(&self) -> impl Iterator<Item = &str> {
        self.annotators.iter().map(|a| a.id.as_str())
    }

    pub fn corpus_ref(&self) -> &str {
        &self.corpus_ref
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Canonical serialization sorted by (annotator, justification).
    pub fn to_jsonl(&self) -> String {
        to_jsonl(self.records.values())
    }
}

struct Builder<'c> {
    corpus: &'c Corpus,
    records: BTreeMap<(String, String), SeatRecord>,
    profiles: Option<Vec<AnnotatorProfile>>,
    inferred: BTreeSet<String>,
}

impl<'c> Builder<'c> {
    fn new(corpus: &'c Corpus, profiles: Option<Vec<AnnotatorProfile>>) -> Self {
        Self {
            corpus,
            records: BTreeMap::new(),
            profiles,
            inferred: BTreeSet::new(),
        }
    }

    fn push(&mut self, line: usize, record: SeatRecord) -> Result<(), CorpusError> {
        let justification = self.corpus.get(&record.justification_id).ok_or_else(|| {
            CorpusError::DanglingJustification {
                line,
                justification: record.justification_id.clone(),
            }
        })?;
        match &self.profiles {
            Some(profiles) => {
                if !profiles.iter().any(|p| p.id == record.annotator_id) {
                    return Err(CorpusError::UnknownAnnotator {
                        line,
                        annotator: record.annotator_id.clone(),
                    });
                }
            }
            None => {
                self.inferred.insert(record.annotator_id.clone());
            }
        }
        let len = justification.text.chars().count();
        for span in &record.argument {
            if span.start >= span.end || span.end > len {
                return Err(CorpusError::SpanOutOfBounds {
                    line,
                    annotator: record.annotator_id.clone(),
                    justification: record.justification_id.clone(),
                    start: span.start,
                    end: span.end,
                    len,
                });
            }
            if char_slice(&justification.text, span.start, span.end) != span.text {
                return Err(CorpusError::SpanTextMismatch {
                    line,
                    annotator: record.annotator_id.clone(),
                    justification: record.justification_id.clone(),
                    start: span.start,
                    end: span.end,
                    text: span.text.clone(),
                });
            }
        }
        let key = (record.annotator_id.clone(), record.justification_id.clone());
        if self.records.contains_key(&key) {
            return Err(CorpusError::DuplicateRecord {
                line,
                annotator: key.0,
                justification: key.1,
            });
        }
        self.records.insert(key, record);
        Ok(())
    }

    fn finish(self) -> AnnotationSet {
        let mut annotators = match self.profiles {
            Some(p) => p,
            None => self.inferred.into_iter().map(AnnotatorProfile::new).collect(),
        };
        annotators.sort_by(|a, b| a.id.cmp(&b.id));
        AnnotationSet {
            records: self.records,
            annotators,
            corpus_ref: self.corpus.digest(),
        }
    }
}

fn typed_record(line: usize, raw: RawSeatRecord) -> Result<SeatRecord, CorpusError> {
    let unknown = |kind: &'static str, label: &str| CorpusError::UnknownLabel {
        line,
        annotator: raw.annotator_id.clone(),
        justification: raw.justification_id.clone(),
        kind,
        label: label.to_string(),
    };
    let sentiment = match raw.sentiment.as_deref() {
        None => None,
        Some(s) => Some(Sentiment::from_name(s).ok_or_else(|| unknown(Sentiment::KIND, s))?),
    };
    let emotions = raw
        .emotions
        .iter()
        .map(|e| Emotion::from_name(e).ok_or_else(|| unknown(Emotion::KIND, e)))
        .collect::<Result<_, _>>()?;
    let topics = raw
        .topics
        .iter()
        .map(|t| Topic::from_name(t).ok_or_else(|| unknown(Topic::KIND, t)))
        .collect::<Result<_, _>>()?;
    let values = raw
        .values
        .iter()
        .map(|v| ValueLabel::from_name(v).ok_or_else(|| unknown("value", v)))
        .collect::<Result<_, _>>()?;
    let argument = raw
        .argument
        .into_iter()
        .map(|s| ArgumentSpan {
            start: s.start,
            end: s.end,
            text: s.text,
        })
        .collect();
    Ok(SeatRecord {
        annotator_id: raw.annotator_id,
        justification_id: raw.justification_id,
        sentiment,
        emotions,
        argument,
        topics,
        values,
    })
}

/// Presence of every (annotator, justification) cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CompletenessReport {
    pub annotators: Vec<String>,
    pub justifications: Vec<String>,
    pub missing: Vec<(String, String)>,
}

impl CompletenessReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.annotators.len() * self.justifications.len()
    }
}

pub fn completeness_report(annotations: &AnnotationSet, corpus: &Corpus) -> CompletenessReport {
    let annotators: Vec<String> = annotations.annotator_ids().map(str::to_string).collect();
    let justifications: Vec<String> = corpus.ids().map(str::to_string).collect();
    let missing = annotators
        .iter()
        .flat_map(|a| justifications.iter().map(move |j| (a, j)))
        .filter(|(a, j)| annotations.get(a, j).is_none())
        .map(|(a, j)| (a.clone(), j.clone()))
        .collect();
    CompletenessReport {
        annotators,
        justifications,
        missing,
    }
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Non-blank lines with 1-based line numbers.
fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub(crate) fn to_jsonl<'a, T, I>(items: I) -> String
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}
