//! Runs the experiment matrix (annotators x settings x justifications x
//! seeds), votes across seeds, and persists everything under the output
//! directory:
//!
//! ```text
//! <out>/plan.json
//! <out>/runs/<annotator>__<setting>.jsonl         one RunRecord per line
//! <out>/predictions/<annotator>__<setting>.jsonl  one PredictionSet per line
//! ```
//!
//! A group file is rewritten atomically once its cells finish. With `resume`
//! set, completed records already on disk are kept and only missing or
//! failed cells are attempted again; the response cache makes repeated
//! calls free either way.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotationSet, Corpus};
use crate::llm::{write_atomic, LlmClient, ModelRequest, StatsSnapshot};
use crate::parsing::{parse_response, ParsedPrediction};
use crate::prompting::{build_prompt, enumerate_settings, ExperimentSetting, Method};
use crate::retrieval::{knn_filtered, EmbeddingIndex, NeighborList, RetrievalError};
use crate::taxonomy::{Granularity, TaxonomyMap, ValueLabel};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("few-shot settings need an embedding index")]
    MissingIndex,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VoteError {
    #[error("vote for {annotator}/{setting}/{justification} is missing seeds {missing:?}")]
    MissingSeeds {
        annotator: String,
        setting: String,
        justification: String,
        missing: Vec<u64>,
    },
    #[error("threshold {threshold} exceeds the {seeds} seeds")]
    Threshold { threshold: usize, seeds: usize },
    #[error("records from different cells passed to one vote")]
    MixedCells,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Send the preamble as a system message.
    #[serde(default)]
    pub system_role: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            model: "meta-llama/Meta-Llama-3.1-8B-Instruct".to_string(),
            temperature: 0.7,
            max_tokens: 256,
            system_role: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub corpus_ref: String,
    pub settings: Vec<ExperimentSetting>,
    pub annotators: Vec<String>,
    pub seeds: Vec<u64>,
    pub vote_threshold: usize,
    /// Granularity predictions and gold are compared at.
    pub scoring: Granularity,
    pub model: ModelSettings,
    pub provider: String,
    pub concurrency: usize,
    /// Leave out demonstrations whose gold value set is empty.
    #[serde(default)]
    pub skip_unlabeled_demos: bool,
    pub output_dir: PathBuf,
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const DEFAULT_VOTE_THRESHOLD: usize = 3;

impl ExperimentPlan {
    /// All 21 settings for every annotator, seeds 1..=5, threshold 3.
    pub fn default_for(annotations: &AnnotationSet, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus_ref: annotations.corpus_ref().to_string(),
            settings: enumerate_settings(Granularity::Parent),
            annotators: annotations.annotator_ids().map(str::to_string).collect(),
            seeds: DEFAULT_SEEDS.to_vec(),
            vote_threshold: DEFAULT_VOTE_THRESHOLD,
            scoring: Granularity::Parent,
            model: ModelSettings::default(),
            provider: "mock".to_string(),
            concurrency: 4,
            skip_unlabeled_demos: false,
            output_dir: output_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let fail = |m: String| Err(OrchestratorError::Plan(m));
        if self.vote_threshold == 0 {
            return fail("vote threshold must be at least 1".into());
        }
        if self.seeds.len() < self.vote_threshold {
            return fail(format!(
                "{} seeds cannot reach a vote threshold of {}",
                self.seeds.len(),
                self.vote_threshold
            ));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return fail("seed list has duplicates".into());
        }
        if self.settings.iter().collect::<BTreeSet<_>>().len() != self.settings.len() {
            return fail("setting list has duplicates".into());
        }
        if self.scoring == Granularity::Leaf
            && self.settings.iter().any(|s| s.value_granularity == Granularity::Parent)
        {
            return fail("leaf scoring needs leaf-granularity prompts".into());
        }
        Ok(())
    }

    /// Experiments = settings x annotators.
    pub fn experiments(&self) -> usize {
        self.settings.len() * self.annotators.len()
    }

    pub fn expected_records(&self, corpus_size: usize) -> usize {
        self.experiments() * corpus_size * self.seeds.len()
    }

    pub fn write(&self, path: &Path) -> Result<(), OrchestratorError> {
        let json = serde_json::to_string_pretty(self).expect("plan serializes");
        write_atomic(path, json.as_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| OrchestratorError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub annotator_id: String,
    pub setting: ExperimentSetting,
    pub justification_id: String,
    pub seed: u64,
    pub cache_key: Option<String>,
    pub raw_response: Option<String>,
    pub prediction: Option<ParsedPrediction>,
    /// Set when the cell could not be completed.
    pub error: Option<String>,
    pub cached: bool,
    pub retries: u32,
    pub latency_ms: u64,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.error.is_none() && self.prediction.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub annotator_id: String,
    pub setting: ExperimentSetting,
    pub justification_id: String,
    pub labels: BTreeSet<ValueLabel>,
    /// Seeds predicting each label, for every label predicted at least once.
    pub support: BTreeMap<ValueLabel, usize>,
}

/// Majority vote across seeds: a label is kept when at least `threshold`
/// seeds predict it. A failed parse counts as an empty prediction; a seed
/// without a completed record is an error.
pub fn vote(records: &[&RunRecord], seeds: &[u64], threshold: usize) -> Result<PredictionSet, VoteError> {
    if threshold > seeds.len() {
        return Err(VoteError::Threshold {
            threshold,
            seeds: seeds.len(),
        });
    }
    let first = records.first().ok_or_else(|| VoteError::MissingSeeds {
        annotator: String::new(),
        setting: String::new(),
        justification: String::new(),
        missing: seeds.to_vec(),
    })?;
    if records.iter().any(|r| {
        r.annotator_id != first.annotator_id
            || r.setting != first.setting
            || r.justification_id != first.justification_id
    }) {
        return Err(VoteError::MixedCells);
    }
    let by_seed: HashMap<u64, &ParsedPrediction> = records
        .iter()
        .filter(|r| r.is_complete())
        .filter_map(|r| r.prediction.as_ref().map(|p| (r.seed, p)))
        .collect();
    let missing: Vec<u64> = seeds.iter().copied().filter(|s| !by_seed.contains_key(s)).collect();
    if !missing.is_empty() {
        return Err(VoteError::MissingSeeds {
            annotator: first.annotator_id.clone(),
            setting: first.setting.to_string(),
            justification: first.justification_id.clone(),
            missing,
        });
    }
    let mut support: BTreeMap<ValueLabel, usize> = BTreeMap::new();
    for seed in seeds {
        for label in &by_seed[seed].labels {
            *support.entry(*label).or_default() += 1;
        }
    }
    let labels = support
        .iter()
        .filter(|(_, &n)| n >= threshold)
        .map(|(l, _)| *l)
        .collect();
    Ok(PredictionSet {
        annotator_id: first.annotator_id.clone(),
        setting: first.setting,
        justification_id: first.justification_id.clone(),
        labels,
        support,
    })
}

/// Everything a run reads besides the plan and the model client.
pub struct ExperimentInputs<'a> {
    pub corpus: &'a Corpus,
    pub annotations: &'a AnnotationSet,
    pub taxonomy: &'a TaxonomyMap,
    pub index: Option<&'a EmbeddingIndex>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub records: usize,
    pub attempted: usize,
    pub reused: usize,
    pub failed: usize,
    pub predictions: usize,
    pub vote_errors: usize,
    pub client: StatsSnapshot,
}

pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub predictions: Vec<PredictionSet>,
    pub summary: RunSummary,
}

fn group_file_name(annotator: &str, setting: &ExperimentSetting) -> String {
    let safe: String = annotator
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}__{setting}.jsonl")
}

pub fn runs_path(out: &Path, annotator: &str, setting: &ExperimentSetting) -> PathBuf {
    out.join("runs").join(group_file_name(annotator, setting))
}

pub fn predictions_path(out: &Path, annotator: &str, setting: &ExperimentSetting) -> PathBuf {
    out.join("predictions").join(group_file_name(annotator, setting))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, OrchestratorError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| OrchestratorError::Format {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), OrchestratorError> {
    write_atomic(path, crate::corpus::to_jsonl(rows).as_bytes()).map_err(io_err(path))
}

/// Every `*.jsonl` under `dir`, in file-name order.
fn read_dir_jsonl<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<Vec<T>, OrchestratorError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_jsonl(&p)?);
    }
    Ok(rows)
}

pub fn load_run_records(out: &Path) -> Result<Vec<RunRecord>, OrchestratorError> {
    read_dir_jsonl(&out.join("runs"))
}

pub fn load_predictions(out: &Path) -> Result<Vec<PredictionSet>, OrchestratorError> {
    read_dir_jsonl(&out.join("predictions"))
}

/// Neighbour lists of length `k` for every justification, per annotator when
/// unlabeled demonstrations are filtered.
fn neighbor_table(
    plan: &ExperimentPlan,
    inputs: &ExperimentInputs<'_>,
    annotator: &str,
    k: usize,
) -> Result<HashMap<String, NeighborList>, OrchestratorError> {
    let index = inputs.index.ok_or(OrchestratorError::MissingIndex)?;
    index.check_covers(inputs.corpus)?;
    let mut table = HashMap::new();
    for id in inputs.corpus.ids() {
        let keep = |cand: &str| {
            !plan.skip_unlabeled_demos
                || inputs
                    .annotations
                    .get(annotator, cand)
                    .is_some_and(|r| !r.values.is_empty())
        };
        table.insert(id.to_string(), knn_filtered(index, id, k, keep)?);
    }
    Ok(table)
}

struct Cell<'a> {
    justification_id: &'a str,
    seed: u64,
}

fn run_cell(
    plan: &ExperimentPlan,
    inputs: &ExperimentInputs<'_>,
    client: &LlmClient,
    annotator: &str,
    setting: &ExperimentSetting,
    neighbors: Option<&HashMap<String, NeighborList>>,
    cell: &Cell<'_>,
) -> RunRecord {
    let mut record = RunRecord {
        annotator_id: annotator.to_string(),
        setting: *setting,
        justification_id: cell.justification_id.to_string(),
        seed: cell.seed,
        cache_key: None,
        raw_response: None,
        prediction: None,
        error: None,
        cached: false,
        retries: 0,
        latency_ms: 0,
    };
    let empty = Vec::new();
    let neighbor_list = neighbors
        .and_then(|t| t.get(cell.justification_id))
        .unwrap_or(&empty);
    let bundle = match build_prompt(
        setting,
        annotator,
        cell.justification_id,
        inputs.corpus,
        inputs.annotations,
        neighbor_list,
        inputs.taxonomy,
    ) {
        Ok(b) => b,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let request = ModelRequest {
        model: plan.model.model.clone(),
        prompt: bundle.to_prompt(plan.model.system_role),
        seed: cell.seed,
        temperature: plan.model.temperature,
        max_tokens: plan.model.max_tokens,
    };
    record.cache_key = Some(request.cache_key());
    match client.complete(&request) {
        Ok(response) => {
            record.prediction = Some(parse_response(&response.text, inputs.taxonomy, plan.scoring));
            record.raw_response = Some(response.text);
            record.cached = response.cached;
            record.retries = response.meta.retries;
            record.latency_ms = response.meta.latency_ms;
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Execute every cell of `plan`, vote, and persist records and predictions.
/// Cells that fail are recorded with an error and the run continues.
pub fn run_plan(
    plan: &ExperimentPlan,
    inputs: &ExperimentInputs<'_>,
    client: &LlmClient,
    resume: bool,
) -> Result<RunOutput, OrchestratorError> {
    plan.validate()?;
    for a in &plan.annotators {
        if !inputs.annotations.annotator_ids().any(|id| id == a) {
            return Err(OrchestratorError::Plan(format!("unknown annotator {a:?}")));
        }
    }
    let out = plan.output_dir.as_path();
    fs::create_dir_all(out.join("runs")).map_err(io_err(out))?;
    fs::create_dir_all(out.join("predictions")).map_err(io_err(out))?;
    plan.write(&out.join("plan.json"))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.concurrency.max(1))
        .build()
        .map_err(|e| OrchestratorError::Plan(format!("thread pool: {e}")))?;

    let max_k = plan
        .settings
        .iter()
        .filter(|s| s.method == Method::FewShot)
        .filter_map(|s| s.k)
        .max();
    let ids: Vec<&str> = inputs.corpus.ids().collect();
    let mut all_records = Vec::new();
    let mut all_predictions = Vec::new();
    let mut summary = RunSummary::default();

    for annotator in &plan.annotators {
        let neighbors = match max_k {
            Some(k) => Some(neighbor_table(plan, inputs, annotator, k)?),
            None => None,
        };
        for setting in &plan.settings {
            let path = runs_path(out, annotator, setting);
            let mut done: BTreeMap<(String, u64), RunRecord> = BTreeMap::new();
            if resume && path.exists() {
                for r in read_jsonl::<RunRecord>(&path)? {
                    if r.is_complete() && plan.seeds.contains(&r.seed) {
                        done.insert((r.justification_id.clone(), r.seed), r);
                    }
                }
            }
            summary.reused += done.len();
            let cells: Vec<Cell<'_>> = ids
                .iter()
                .flat_map(|j| plan.seeds.iter().map(move |s| (j, *s)))
                .filter(|(j, s)| !done.contains_key(&(j.to_string(), *s)))
                .map(|(j, seed)| Cell {
                    justification_id: j,
                    seed,
                })
                .collect();
            summary.attempted += cells.len();
            let fresh: Vec<RunRecord> = pool.install(|| {
                cells
                    .par_iter()
                    .map(|cell| run_cell(plan, inputs, client, annotator, setting, neighbors.as_ref(), cell))
                    .collect()
            });
            for r in fresh {
                done.insert((r.justification_id.clone(), r.seed), r);
            }
            let records: Vec<RunRecord> = done.into_values().collect();
            summary.failed += records.iter().filter(|r| !r.is_complete()).count();
            write_jsonl(&path, &records)?;

            let mut predictions = Vec::new();
            for id in &ids {
                let cell: Vec<&RunRecord> = records.iter().filter(|r| r.justification_id == *id).collect();
                match vote(&cell, &plan.seeds, plan.vote_threshold) {
                    Ok(p) => predictions.push(p),
                    Err(e) => {
                        log::warn!("{e}");
                        summary.vote_errors += 1;
                    }
                }
            }
            write_jsonl(&predictions_path(out, annotator, setting), &predictions)?;
            log::info!(
                "{annotator} {setting}: {} records, {} predictions",
                records.len(),
                predictions.len()
            );
            summary.predictions += predictions.len();
            all_records.extend(records);
            all_predictions.extend(predictions);
        }
    }
    summary.records = all_records.len();
    summary.client = client.stats();
    let summary_path = out.join("run_summary.json");
    write_atomic(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes(),
    )
    .map_err(io_err(&summary_path))?;
    Ok(RunOutput {
        records: all_records,
        predictions: all_predictions,
        summary,
    })
}
