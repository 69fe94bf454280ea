//! Deterministic synthetic corpora for offline runs.
//!
//! Each item gets a topic and a sentiment. Every synthetic annotator agrees
//! on those two dimensions and derives its values from them: one value tied
//! to the topic, one tied to the sentiment and one tied to the pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AnnotationSet, AnnotatorProfile, ArgumentSpan, Corpus, Justification, SeatRecord};
use crate::taxonomy::{Emotion, Sentiment, Topic, ValueLabel, ValueLeaf, SENTIMENTS, TOPICS, VALUE_LEAVES};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub items: usize,
    pub annotators: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            items: 20,
            annotators: 5,
            seed: 7,
        }
    }
}

const STANCES: [&str; 5] = [
    "I strongly oppose",
    "I have serious doubts about",
    "I have no strong view on",
    "I mostly support",
    "I fully support",
];

const EMOTION_BY_SENTIMENT: [[&str; 2]; 5] = [
    ["anger", "disgust"],
    ["disappointment", "nervousness"],
    ["curiosity", "confusion"],
    ["approval", "optimism"],
    ["joy", "excitement"],
];

/// Value tables of one synthetic annotator.
struct ValueRule {
    by_topic: Vec<usize>,
    by_sentiment: Vec<usize>,
    joint: Vec<Vec<usize>>,
}

impl ValueRule {
    fn new(seed: u64, annotator: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9 * (annotator as u64 + 1)));
        let mut pick = || rng.random_range(0..VALUE_LEAVES.len());
        let by_topic = (0..TOPICS.len()).map(|_| pick()).collect();
        let by_sentiment = (0..SENTIMENTS.len()).map(|_| pick()).collect();
        let joint = (0..TOPICS.len())
            .map(|_| (0..SENTIMENTS.len()).map(|_| pick()).collect())
            .collect();
        Self {
            by_topic,
            by_sentiment,
            joint,
        }
    }

    fn values(&self, topic: usize, sentiment: usize) -> Vec<ValueLabel> {
        [self.by_topic[topic], self.by_sentiment[sentiment], self.joint[topic][sentiment]]
            .into_iter()
            .map(|i| ValueLabel::Leaf(ValueLeaf::from_index(i).expect("leaf index")))
            .collect()
    }
}

pub fn annotator_id(n: usize) -> String {
    format!("s{}", n + 1)
}

pub fn generate(spec: SyntheticSpec) -> (Corpus, AnnotationSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.items.to_string().len().max(3);
    let mut justifications = Vec::with_capacity(spec.items);
    let mut facets = Vec::with_capacity(spec.items);
    for i in 0..spec.items {
        let topic = rng.random_range(0..TOPICS.len());
        let sentiment = rng.random_range(0..SENTIMENTS.len());
        let stance = STANCES[sentiment];
        let text = format!(
            "{stance} the plans on {} (statement {}).",
            TOPICS[topic].to_lowercase(),
            i + 1
        );
        justifications.push(Justification {
            id: format!("syn-{:0width$}", i + 1),
            text,
        });
        facets.push((topic, sentiment, stance.chars().count()));
    }
    let corpus = Corpus::new(justifications).expect("synthetic corpus is valid");

    let profiles: Vec<AnnotatorProfile> = (0..spec.annotators)
        .map(|a| AnnotatorProfile {
            id: annotator_id(a),
            notes: "synthetic".to_string(),
        })
        .collect();
    let mut records = Vec::new();
    for a in 0..spec.annotators {
        let rule = ValueRule::new(spec.seed, a);
        for (j, (topic, sentiment, stance_len)) in corpus.iter().zip(&facets) {
            let mut record = SeatRecord::empty(annotator_id(a), &j.id);
            record.sentiment = Sentiment::from_index(*sentiment);
            record.topics.insert(Topic::from_index(*topic).expect("topic index"));
            let emotion = EMOTION_BY_SENTIMENT[*sentiment][a % 2];
            record.emotions.insert(Emotion::parse(emotion).expect("emotion name"));
            record.argument = ArgumentSpan::from_text(&j.text, 0, *stance_len).into_iter().collect();
            record.values = rule.values(*topic, *sentiment).into_iter().collect();
            records.push(record);
        }
    }
    let annotations = AnnotationSet::new(records, &corpus, Some(profiles)).expect("synthetic annotations are valid");
    (corpus, annotations)
}

pub const BUNDLED_CORPUS: &str = include_str!("../data/synthetic/corpus.jsonl");
pub const BUNDLED_ANNOTATIONS: &str = include_str!("../data/synthetic/annotations.jsonl");
pub const BUNDLED_ANNOTATORS: &str = include_str!("../data/synthetic/annotators.jsonl");

/// The 20-item corpus shipped with the crate, equal to `generate(Default)`.
pub fn bundled() -> (Corpus, AnnotationSet) {
    let corpus = Corpus::parse(BUNDLED_CORPUS).expect("bundled corpus parses");
    let profiles = crate::corpus::parse_profiles(BUNDLED_ANNOTATORS).expect("bundled profiles parse");
    let annotations =
        AnnotationSet::parse(BUNDLED_ANNOTATIONS, &corpus, Some(profiles)).expect("bundled annotations parse");
    (corpus, annotations)
}

pub fn profiles_jsonl(annotations: &AnnotationSet) -> String {
    crate::corpus::to_jsonl(annotations.annotators())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    #[test]
    fn generation_is_deterministic() {
        let (c1, a1) = generate(SyntheticSpec::default());
        let (c2, a2) = generate(SyntheticSpec::default());
        assert_eq!(c1.to_jsonl(), c2.to_jsonl());
        assert_eq!(a1.to_jsonl(), a2.to_jsonl());
        assert_eq!(c1.len(), 20);
        assert_eq!(a1.len(), 100);
    }

    #[test]
    fn values_follow_topic_and_sentiment() {
        let (_, annotations) = generate(SyntheticSpec {
            items: 60,
            annotators: 2,
            seed: 3,
        });
        let mut seen = std::collections::HashMap::new();
        for r in annotations.records() {
            let key = (r.annotator_id.clone(), r.sentiment, r.topics.clone());
            let prev = seen.insert(key, r.values.clone());
            if let Some(prev) = prev {
                assert_eq!(prev, r.values);
            }
        }
    }

    #[test]
    fn bundled_matches_generator() {
        let (corpus, annotations) = generate(SyntheticSpec::default());
        if std::env::var_os("SEAT_REGENERATE").is_some() {
            let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synthetic");
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(dir.join("corpus.jsonl"), corpus.to_jsonl()).unwrap();
            std::fs::write(dir.join("annotations.jsonl"), annotations.to_jsonl()).unwrap();
            std::fs::write(dir.join("annotators.jsonl"), profiles_jsonl(&annotations)).unwrap();
            return;
        }
        assert_eq!(BUNDLED_CORPUS, corpus.to_jsonl());
        assert_eq!(BUNDLED_ANNOTATIONS, annotations.to_jsonl());
        let (bc, ba) = bundled();
        assert_eq!(bc, corpus);
        assert_eq!(ba, annotations);
    }
}
