//! Experiment settings and prompt construction.
//!
//! A prompt has three parts: a preamble (task instruction, candidate value
//! list, output format), zero or more demonstrations drawn from the target
//! annotator's own annotations, and the query block for the reference
//! justification. Text comes from the versioned templates under
//! `assets/prompt_v1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{AnnotationSet, Corpus, SeatRecord};
use crate::llm::Prompt;
use crate::parsing::format_list;
use crate::retrieval::Neighbor;
use crate::taxonomy::{Granularity, TaxonomyMap};

pub const TEMPLATE_VERSION: &str = "prompt_v1";
const PREAMBLE: &str = include_str!("../assets/prompt_v1/preamble.txt");
const CONTEXT: &str = include_str!("../assets/prompt_v1/context.txt");
const EXAMPLES_HEADER: &str = include_str!("../assets/prompt_v1/examples_header.txt");
const DEMONSTRATION: &str = include_str!("../assets/prompt_v1/demonstration.txt");
const QUERY: &str = include_str!("../assets/prompt_v1/query.txt");

/// Line prefixes other components rely on when reading prompts back.
pub const SENTENCE_PREFIX: &str = "Sentence: ";
pub const VALUES_PREFIX: &str = "Values:";
pub const CANDIDATES_PREFIX: &str = "Candidate values: ";

/// Neighbour counts for the three few-shot sizes (5, 10, 15 examples
/// including the reference).
pub const FEW_SHOT_KS: [usize; 3] = [4, 9, 14];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("annotator {annotator:?} has no record for justification {justification:?}")]
    MissingRecord {
        annotator: String,
        justification: String,
    },
    #[error("justification {0:?} is not in the corpus")]
    UnknownJustification(String),
    #[error("few-shot with K = {k} needs {k} neighbours, got {got}")]
    NotEnoughNeighbors { k: usize, got: usize },
    #[error("unrecognised setting {0:?}")]
    BadSetting(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dimension {
    Argument,
    Emotion,
    Sentiment,
    Topic,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [Dimension::Argument, Dimension::Emotion, Dimension::Sentiment, Dimension::Topic];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Argument => "Argument",
            Dimension::Emotion => "Emotion",
            Dimension::Sentiment => "Sentiment",
            Dimension::Topic => "Topic",
        }
    }
}

/// The five legal dimension subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DimensionSubset {
    Sentiment,
    Emotion,
    Argument,
    Topic,
    All,
}

impl DimensionSubset {
    /// Table column order.
    pub const ALL: [DimensionSubset; 5] = [
        DimensionSubset::Sentiment,
        DimensionSubset::Emotion,
        DimensionSubset::Argument,
        DimensionSubset::Topic,
        DimensionSubset::All,
    ];

    /// Dimensions in prompt order: Argument, Emotion, Sentiment, Topic.
    pub fn dimensions(self) -> &'static [Dimension] {
        match self {
            DimensionSubset::Sentiment => &[Dimension::Sentiment],
            DimensionSubset::Emotion => &[Dimension::Emotion],
            DimensionSubset::Argument => &[Dimension::Argument],
            DimensionSubset::Topic => &[Dimension::Topic],
            DimensionSubset::All => &[
                Dimension::Argument,
                Dimension::Emotion,
                Dimension::Sentiment,
                Dimension::Topic,
            ],
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            DimensionSubset::Sentiment => "S",
            DimensionSubset::Emotion => "E",
            DimensionSubset::Argument => "A",
            DimensionSubset::Topic => "T",
            DimensionSubset::All => "all",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.code() == code)
    }

    pub fn label(self) -> &'static str {
        match self {
            DimensionSubset::All => "All",
            other => other.dimensions()[0].name(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ZS")]
    ZeroShot,
    #[serde(rename = "OS")]
    OneShot,
    #[serde(rename = "FS")]
    FewShot,
}

/// One cell of the experiment matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExperimentSetting {
    pub method: Method,
    pub dims: Option<DimensionSubset>,
    /// Neighbour count; few-shot only.
    pub k: Option<usize>,
    pub value_granularity: Granularity,
}

impl ExperimentSetting {
    pub fn zero_shot(value_granularity: Granularity) -> Self {
        Self {
            method: Method::ZeroShot,
            dims: None,
            k: None,
            value_granularity,
        }
    }

    pub fn one_shot(dims: DimensionSubset, value_granularity: Granularity) -> Self {
        Self {
            method: Method::OneShot,
            dims: Some(dims),
            k: None,
            value_granularity,
        }
    }

    pub fn few_shot(k: usize, dims: DimensionSubset, value_granularity: Granularity) -> Self {
        Self {
            method: Method::FewShot,
            dims: Some(dims),
            k: Some(k),
            value_granularity,
        }
    }

    /// Examples shown to the model, counting the reference itself.
    pub fn total_examples(&self) -> usize {
        match self.method {
            Method::ZeroShot | Method::OneShot => 1,
            Method::FewShot => self.k.unwrap_or(0) + 1,
        }
    }

    pub fn demonstrations(&self) -> usize {
        match self.method {
            Method::FewShot => self.k.unwrap_or(0),
            _ => 0,
        }
    }

    /// Row label as used in result tables.
    pub fn method_label(&self) -> String {
        match self.method {
            Method::ZeroShot => "Baseline".to_string(),
            Method::OneShot => "One-shot".to_string(),
            Method::FewShot => format!("Few-shot ({})", self.total_examples()),
        }
    }
}

impl fmt::Display for ExperimentSetting {
    /// `ZS`, `OS-E`, `FS-10-all`; leaf-granularity settings get `@leaf`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.method, self.dims) {
            (Method::ZeroShot, _) | (_, None) => f.write_str("ZS")?,
            (Method::OneShot, Some(d)) => write!(f, "OS-{}", d.code())?,
            (Method::FewShot, Some(d)) => write!(f, "FS-{}-{}", self.total_examples(), d.code())?,
        }
        if self.value_granularity == Granularity::Leaf {
            f.write_str("@leaf")?;
        }
        Ok(())
    }
}

impl FromStr for ExperimentSetting {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PromptError::BadSetting(s.to_string());
        let (body, granularity) = match s.strip_suffix("@leaf") {
            Some(body) => (body, Granularity::Leaf),
            None => (s, Granularity::Parent),
        };
        let parts: Vec<&str> = body.split('-').collect();
        match parts.as_slice() {
            ["ZS"] => Ok(Self::zero_shot(granularity)),
            ["OS", d] => Ok(Self::one_shot(DimensionSubset::from_code(d).ok_or_else(bad)?, granularity)),
            ["FS", n, d] => {
                let total: usize = n.parse().map_err(|_| bad())?;
                if total < 2 {
                    return Err(bad());
                }
                let dims = DimensionSubset::from_code(d).ok_or_else(bad)?;
                Ok(Self::few_shot(total - 1, dims, granularity))
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for ExperimentSetting {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExperimentSetting {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// ZS; OS over S/E/A/T/all; then FS-5, FS-10, FS-15 over the same columns.
pub fn enumerate_settings(value_granularity: Granularity) -> Vec<ExperimentSetting> {
    let mut settings = vec![ExperimentSetting::zero_shot(value_granularity)];
    settings.extend(
        DimensionSubset::ALL
            .into_iter()
            .map(|d| ExperimentSetting::one_shot(d, value_granularity)),
    );
    for k in FEW_SHOT_KS {
        settings.extend(
            DimensionSubset::ALL
                .into_iter()
                .map(|d| ExperimentSetting::few_shot(k, d, value_granularity)),
        );
    }
    settings
}

fn one_line(text: &str) -> String {
    text.replace(['\r', '\n'], " ")
}

/// Annotation lines for `dims`, in Argument, Emotion, Sentiment, Topic order.
/// Empty annotations render as `None`.
pub fn seat_lines(record: &SeatRecord, dims: DimensionSubset) -> Vec<String> {
    dims.dimensions()
        .iter()
        .map(|dim| {
            let content = match dim {
                Dimension::Argument => record
                    .argument
                    .iter()
                    .map(|span| format!("\"{}\"", one_line(&span.text)))
                    .collect::<Vec<_>>()
                    .join(", "),
                Dimension::Emotion => record
                    .emotions
                    .iter()
                    .map(|e| e.name())
                    .collect::<Vec<_>>()
                    .join(", "),
                Dimension::Sentiment => record.sentiment.map(|s| s.name()).unwrap_or_default().to_string(),
                Dimension::Topic => record
                    .topics
                    .iter()
                    .map(|t| t.name())
                    .collect::<Vec<_>>()
                    .join(", "),
            };
            let content = if content.is_empty() { "None".to_string() } else { content };
            format!("{} Annotations for this sentence: {content}", dim.name())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Demonstration {
    pub justification_id: String,
    pub sentence: String,
    pub seat_lines: Vec<String>,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QueryBlock {
    pub justification_id: String,
    pub sentence: String,
    pub seat_lines: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub preamble: String,
    pub demonstrations: Vec<Demonstration>,
    pub query: QueryBlock,
}

fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    debug_assert!(!out.contains("{{"), "unfilled placeholder in {out:?}");
    out
}

fn context_tasks(dims: DimensionSubset) -> String {
    match dims.dimensions() {
        [single] => format!("{} detection task", single.name()),
        many => {
            let names: Vec<&str> = many.iter().map(|d| d.name()).collect();
            let (last, rest) = names.split_last().expect("non-empty");
            format!("{}, and {last} detection tasks", rest.join(", "))
        }
    }
}

fn preamble(setting: &ExperimentSetting) -> String {
    let candidates = format_list(setting.value_granularity.inventory());
    let mut text = fill(PREAMBLE, &[("candidates", &candidates)]);
    if let Some(dims) = setting.dims {
        text.push_str(&fill(CONTEXT, &[("tasks", &context_tasks(dims))]));
    }
    text
}

fn record<'a>(
    annotations: &'a AnnotationSet,
    annotator_id: &str,
    justification_id: &str,
) -> Result<&'a SeatRecord, PromptError> {
    annotations
        .get(annotator_id, justification_id)
        .ok_or_else(|| PromptError::MissingRecord {
            annotator: annotator_id.to_string(),
            justification: justification_id.to_string(),
        })
}

/// Assemble the prompt for one (setting, annotator, reference) cell.
/// `neighbors` must be ordered most similar first; few-shot settings use its
/// first `k` entries.
pub fn build_prompt(
    setting: &ExperimentSetting,
    annotator_id: &str,
    reference_id: &str,
    corpus: &Corpus,
    annotations: &AnnotationSet,
    neighbors: &[Neighbor],
    taxonomy: &TaxonomyMap,
) -> Result<PromptBundle, PromptError> {
    let sentence = |id: &str| {
        corpus
            .get(id)
            .map(|j| one_line(&j.text))
            .ok_or_else(|| PromptError::UnknownJustification(id.to_string()))
    };

    let query_lines = match setting.dims {
        Some(dims) if setting.method != Method::ZeroShot => {
            seat_lines(record(annotations, annotator_id, reference_id)?, dims)
        }
        _ => Vec::new(),
    };
    let query = QueryBlock {
        justification_id: reference_id.to_string(),
        sentence: sentence(reference_id)?,
        seat_lines: query_lines,
    };

    let mut demonstrations = Vec::new();
    if setting.method == Method::FewShot {
        let k = setting.k.unwrap_or(0);
        if neighbors.len() < k {
            return Err(PromptError::NotEnoughNeighbors {
                k,
                got: neighbors.len(),
            });
        }
        let dims = setting.dims.unwrap_or(DimensionSubset::All);
        for neighbor in &neighbors[..k] {
            let id = neighbor.justification_id.as_str();
            let rec = record(annotations, annotator_id, id)?;
            let values = taxonomy
                .at_granularity(rec.values.iter().copied(), setting.value_granularity)
                .into_iter()
                .map(|l| l.name().to_string())
                .collect();
            demonstrations.push(Demonstration {
                justification_id: id.to_string(),
                sentence: sentence(id)?,
                seat_lines: seat_lines(rec, dims),
                values,
            });
        }
    }

    Ok(PromptBundle {
        preamble: preamble(setting),
        demonstrations,
        query,
    })
}

fn annotation_block(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

impl PromptBundle {
    /// Everything after the preamble.
    pub fn body(&self) -> String {
        let mut out = String::new();
        if !self.demonstrations.is_empty() {
            out.push_str(EXAMPLES_HEADER);
            for demo in &self.demonstrations {
                out.push('\n');
                out.push_str(&fill(
                    DEMONSTRATION,
                    &[
                        ("sentence", &demo.sentence),
                        ("annotations", &annotation_block(&demo.seat_lines)),
                        ("values", &format_list(&demo.values)),
                    ],
                ));
            }
            out.push('\n');
        }
        out.push_str(&fill(
            QUERY,
            &[
                ("sentence", &self.query.sentence),
                ("annotations", &annotation_block(&self.query.seat_lines)),
            ],
        ));
        out.trim_end().to_string()
    }

    /// Single-text rendering: preamble, blank line, body.
    pub fn render(&self) -> String {
        format!("{}\n{}", self.preamble, self.body())
    }

    /// With `system_role`, the preamble becomes a system message.
    pub fn to_prompt(&self, system_role: bool) -> Prompt {
        if system_role {
            Prompt::Chat {
                system: self.preamble.trim_end().to_string(),
                user: self.body(),
            }
        } else {
            Prompt::Text { text: self.render() }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{Emotion, Sentiment};

    #[test]
    fn twenty_one_settings_in_table_order() {
        let settings = enumerate_settings(Granularity::Parent);
        assert_eq!(settings.len(), 21);
        let ids: Vec<String> = settings.iter().map(ToString::to_string).collect();
        assert_eq!(ids[0], "ZS");
        assert_eq!(&ids[1..6], ["OS-S", "OS-E", "OS-A", "OS-T", "OS-all"]);
        assert_eq!(ids[6], "FS-5-S");
        assert_eq!(ids[20], "FS-15-all");
        let ks: Vec<usize> = settings.iter().filter_map(|s| s.k).collect();
        assert_eq!(ks.len(), 15);
        assert!(ks.iter().all(|k| FEW_SHOT_KS.contains(k)));
        assert_eq!(settings.iter().filter(|s| s.dims == Some(DimensionSubset::All)).count(), 4);
        for s in settings.iter().filter(|s| s.method == Method::FewShot) {
            assert_eq!(s.total_examples(), s.k.unwrap() + 1);
        }
    }

    #[test]
    fn setting_ids_round_trip() {
        for g in [Granularity::Parent, Granularity::Leaf] {
            for s in enumerate_settings(g) {
                assert_eq!(s.to_string().parse::<ExperimentSetting>().unwrap(), s);
            }
        }
        assert!("FS-1-all".parse::<ExperimentSetting>().is_err());
        assert!("XS".parse::<ExperimentSetting>().is_err());
    }

    #[test]
    fn seat_lines_examples() {
        let mut rec = SeatRecord::empty("a", "j");
        rec.emotions = ["approval", "curiosity"]
            .iter()
            .map(|e| Emotion::parse(e).unwrap())
            .collect();
        assert_eq!(
            seat_lines(&rec, DimensionSubset::Emotion),
            ["Emotion Annotations for this sentence: approval, curiosity"]
        );
        assert_eq!(
            seat_lines(&rec, DimensionSubset::Argument),
            ["Argument Annotations for this sentence: None"]
        );
        rec.sentiment = Some(Sentiment::parse("Somewhat positive").unwrap());
        let all = seat_lines(&rec, DimensionSubset::All);
        assert_eq!(all.len(), 4);
        assert!(all[0].starts_with("Argument"));
        assert!(all[1].starts_with("Emotion"));
        assert_eq!(all[2], "Sentiment Annotations for this sentence: Somewhat positive");
        assert_eq!(all[3], "Topic Annotations for this sentence: None");
    }

    #[test]
    fn context_phrases() {
        assert_eq!(context_tasks(DimensionSubset::Emotion), "Emotion detection task");
        assert_eq!(
            context_tasks(DimensionSubset::All),
            "Argument, Emotion, Sentiment, and Topic detection tasks"
        );
    }

    #[test]
    fn preamble_lists_configured_inventory() {
        let leaf = preamble(&ExperimentSetting::zero_shot(Granularity::Leaf));
        let line = leaf.lines().find(|l| l.starts_with(CANDIDATES_PREFIX)).unwrap();
        let listed = crate::parsing::extract_list(line).items;
        assert_eq!(listed, crate::taxonomy::VALUE_LEAVES);
        assert!(!leaf.contains("You should also consider"));
        let os = preamble(&ExperimentSetting::one_shot(DimensionSubset::Topic, Granularity::Parent));
        assert!(os.contains("previous annotations on the Topic detection task."));
    }
}
