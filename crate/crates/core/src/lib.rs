//! Predicting individual annotators' value interpretations from their SEAT
//! (sentiment, emotion, argument, topic) annotations.
//!
//! The pipeline runs corpus loading, neighbour retrieval, prompt building,
//! model calls with caching, answer parsing, seed voting and scoring. Each
//! stage lives in its own module and can be used on its own.

pub mod config;
pub mod corpus;
pub mod llm;
pub mod metrics;
pub mod orchestrator;
pub mod parsing;
pub mod prompting;
pub mod report;
pub mod retrieval;
pub mod synthetic;
pub mod taxonomy;

pub use corpus::{AnnotationSet, AnnotatorProfile, ArgumentSpan, Corpus, Justification, SeatRecord};
pub use llm::{ChatProvider, LlmClient, MockProvider, MockSpec, ModelRequest, ModelResponse};
pub use metrics::{AgreementReport, ConfusionTally, MetricsReport, MetricsRow};
pub use orchestrator::{ExperimentPlan, PredictionSet, RunRecord};
pub use parsing::{ParseStatus, ParsedPrediction};
pub use prompting::{DimensionSubset, ExperimentSetting, Method, PromptBundle};
pub use retrieval::{EmbeddingIndex, Neighbor};
pub use taxonomy::{Granularity, TaxonomyMap, ValueCategory, ValueLabel, ValueLeaf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Taxonomy(#[from] taxonomy::TaxonomyError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Retrieval(#[from] retrieval::RetrievalError),
    #[error(transparent)]
    Prompt(#[from] prompting::PromptError),
    #[error(transparent)]
    Llm(#[from] llm::LlmError),
    #[error(transparent)]
    Orchestrator(#[from] orchestrator::OrchestratorError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}
