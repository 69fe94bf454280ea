//! Scores and agreement statistics.
//!
//! Prediction quality is micro F1 over (justification, label) pairs pooled
//! per (annotator, setting). Agreement between annotators uses Fleiss' kappa
//! for categorical dimensions, the mean of per-label binarized kappas for
//! multi-label dimensions, and token-level pairwise F1 for argument spans.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotationSet, ArgumentSpan, Corpus, SeatRecord};
use crate::orchestrator::{PredictionSet, RunRecord};
use crate::parsing::ParseStatus;
use crate::prompting::{enumerate_settings, ExperimentSetting, Method};
use crate::taxonomy::{Emotion, Granularity, Sentiment, TaxonomyMap, Topic, ValueLabel, ValueLeaf};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no justification of {annotator}/{setting} has both a prediction and gold values")]
    NoOverlap { annotator: String, setting: String },
    #[error("agreement input: {0}")]
    Agreement(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTally {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionTally {
    pub fn of_sets<T: Ord>(predicted: &BTreeSet<T>, gold: &BTreeSet<T>) -> Self {
        let tp = predicted.intersection(gold).count();
        Self {
            tp,
            fp: predicted.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn add(&mut self, other: ConfusionTally) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// 2TP / (2TP + FP + FN); 1.0 when nothing was predicted or expected.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

impl std::iter::Sum for ConfusionTally {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut total = Self::default();
        for t in iter {
            total.add(t);
        }
        total
    }
}

/// Micro F1 over (predicted, gold) pairs, one pair per item.
pub fn micro_f1<'a, T: Ord + 'a>(items: impl IntoIterator<Item = (&'a BTreeSet<T>, &'a BTreeSet<T>)>) -> f64 {
    items
        .into_iter()
        .map(|(p, g)| ConfusionTally::of_sets(p, g))
        .sum::<ConfusionTally>()
        .f1()
}

/// Gold values expressed at the scoring granularity.
pub fn gold_labels(record: &SeatRecord, taxonomy: &TaxonomyMap, granularity: Granularity) -> BTreeSet<ValueLabel> {
    taxonomy.at_granularity(record.values.iter().copied(), granularity)
}

/// Per-justification tallies of one (annotator, setting).
#[derive(Clone, Debug, PartialEq)]
pub struct CellScore {
    pub annotator_id: String,
    pub setting: ExperimentSetting,
    pub items: Vec<(String, ConfusionTally)>,
    /// Predictions whose justification has no gold record.
    pub unmatched: usize,
}

impl CellScore {
    pub fn tally(&self) -> ConfusionTally {
        self.items.iter().map(|(_, t)| *t).sum()
    }

    pub fn f1(&self) -> f64 {
        self.tally().f1()
    }
}

pub fn score_cell(
    predictions: &[&PredictionSet],
    annotations: &AnnotationSet,
    taxonomy: &TaxonomyMap,
    granularity: Granularity,
) -> Result<CellScore, MetricsError> {
    let first = predictions.first().ok_or_else(|| MetricsError::NoOverlap {
        annotator: String::new(),
        setting: String::new(),
    })?;
    let mut items = Vec::new();
    let mut unmatched = 0;
    for p in predictions {
        match annotations.get(&p.annotator_id, &p.justification_id) {
            Some(record) => {
                let gold = gold_labels(record, taxonomy, granularity);
                items.push((p.justification_id.clone(), ConfusionTally::of_sets(&p.labels, &gold)));
            }
            None => unmatched += 1,
        }
    }
    if items.is_empty() {
        return Err(MetricsError::NoOverlap {
            annotator: first.annotator_id.clone(),
            setting: first.setting.to_string(),
        });
    }
    items.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(CellScore {
        annotator_id: first.annotator_id.clone(),
        setting: first.setting,
        items,
        unmatched,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleissKappa {
    /// `None` when every rating falls in one category (P̄e = 1).
    pub kappa: Option<f64>,
    pub p_bar: f64,
    pub p_e: f64,
}

impl FleissKappa {
    pub fn is_degenerate(&self) -> bool {
        self.kappa.is_none()
    }
}

/// Fleiss' kappa from an items x categories count matrix. Every row must sum
/// to the same number of raters, at least two.
pub fn fleiss_kappa(counts: &[Vec<usize>]) -> Result<FleissKappa, MetricsError> {
    let fail = |m: &str| Err(MetricsError::Agreement(m.to_string()));
    let Some(first) = counts.first() else {
        return fail("no items");
    };
    let k = first.len();
    let n: usize = first.iter().sum();
    if n < 2 {
        return fail("fewer than two raters");
    }
    if counts.iter().any(|row| row.len() != k || row.iter().sum::<usize>() != n) {
        return fail("items have different rater counts or category sets");
    }
    let items = counts.len() as f64;
    let nf = n as f64;
    let p_bar = counts
        .iter()
        .map(|row| {
            let sq: usize = row.iter().map(|c| c * c).sum();
            (sq - n) as f64 / (nf * (nf - 1.0))
        })
        .sum::<f64>()
        / items;
    let totals: Vec<usize> = (0..k).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
    let p_e = totals
        .iter()
        .map(|&t| {
            let p = t as f64 / (items * nf);
            p * p
        })
        .sum::<f64>();
    let used = totals.iter().filter(|&&t| t > 0).count();
    let kappa = (used > 1).then(|| (p_bar - p_e) / (1.0 - p_e));
    Ok(FleissKappa { kappa, p_bar, p_e })
}

/// Fleiss' kappa from per-item rater assignments (`items[i][r]` is rater r's
/// category on item i).
pub fn fleiss_kappa_labels<T: Ord + Clone>(items: &[Vec<T>]) -> Result<FleissKappa, MetricsError> {
    let categories: BTreeSet<&T> = items.iter().flatten().collect();
    let position: BTreeMap<&T, usize> = categories.into_iter().enumerate().map(|(i, c)| (c, i)).collect();
    let counts: Vec<Vec<usize>> = items
        .iter()
        .map(|raters| {
            let mut row = vec![0; position.len()];
            for label in raters {
                row[position[label]] += 1;
            }
            row
        })
        .collect();
    fleiss_kappa(&counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultilabelKappa {
    /// Mean over labels with variance; `None` if no label varies.
    pub kappa: Option<f64>,
    pub per_label: Vec<(String, f64)>,
    /// Labels from the inventory that never vary (always absent or always present).
    pub excluded: usize,
}

/// Mean of per-label binarized Fleiss' kappas. `items[i][r]` is rater r's
/// label set on item i.
pub fn multilabel_kappa<T: Ord + fmt::Display>(
    items: &[Vec<BTreeSet<T>>],
    inventory: &[T],
) -> Result<MultilabelKappa, MetricsError> {
    let mut per_label = Vec::new();
    let mut excluded = 0;
    for label in inventory {
        let counts: Vec<Vec<usize>> = items
            .iter()
            .map(|raters| {
                let present = raters.iter().filter(|s| s.contains(label)).count();
                vec![raters.len() - present, present]
            })
            .collect();
        match fleiss_kappa(&counts)?.kappa {
            Some(k) => per_label.push((label.to_string(), k)),
            None => excluded += 1,
        }
    }
    let kappa = (!per_label.is_empty()).then(|| per_label.iter().map(|(_, k)| k).sum::<f64>() / per_label.len() as f64);
    Ok(MultilabelKappa {
        kappa,
        per_label,
        excluded,
    })
}

/// Indices of whitespace tokens of `text` that overlap any span.
pub fn covered_tokens(text: &str, spans: &[(usize, usize)]) -> BTreeSet<usize> {
    let mut tokens = Vec::new();
    let mut start = None;
    let mut len = 0;
    for (i, c) in text.chars().enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                tokens.push((s, i));
                start = None;
            }
            _ => {}
        }
        len = i + 1;
    }
    if let Some(s) = start {
        tokens.push((s, len));
    }
    tokens
        .iter()
        .enumerate()
        .filter(|(_, (ts, te))| spans.iter().any(|(s, e)| ts < e && s < te))
        .map(|(i, _)| i)
        .collect()
}

/// One item for span agreement: the text and each rater's spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanItem {
    pub text: String,
    pub spans: Vec<Vec<(usize, usize)>>,
}

impl SpanItem {
    pub fn from_records(text: &str, raters: &[&[ArgumentSpan]]) -> Self {
        Self {
            text: text.to_string(),
            spans: raters
                .iter()
                .map(|spans| spans.iter().map(|s| (s.start, s.end)).collect())
                .collect(),
        }
    }
}

/// Mean over ordered rater pairs (g, p) of token-level F1 with g's tokens as
/// gold, tallies pooled across items.
pub fn pairwise_span_f1(items: &[SpanItem]) -> Result<f64, MetricsError> {
    let raters = items.first().map_or(0, |i| i.spans.len());
    if raters < 2 {
        return Err(MetricsError::Agreement("fewer than two raters".into()));
    }
    if items.iter().any(|i| i.spans.len() != raters) {
        return Err(MetricsError::Agreement("items have different rater counts".into()));
    }
    let covered: Vec<Vec<BTreeSet<usize>>> = items
        .iter()
        .map(|item| item.spans.iter().map(|s| covered_tokens(&item.text, s)).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for g in 0..raters {
        for p in 0..raters {
            if g == p {
                continue;
            }
            let tally: ConfusionTally = covered.iter().map(|c| ConfusionTally::of_sets(&c[p], &c[g])).sum();
            total += tally.f1();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// 100 * |A Δ B| / |A|; `None` when A is empty.
pub fn label_change<T: Ord>(baseline: &BTreeSet<T>, alternative: &BTreeSet<T>) -> Option<f64> {
    if baseline.is_empty() {
        return None;
    }
    let diff = baseline.symmetric_difference(alternative).count();
    Some(100.0 * diff as f64 / baseline.len() as f64)
}

/// (justification, label) pairs of a group of predictions.
pub fn prediction_pairs<'a>(predictions: impl IntoIterator<Item = &'a PredictionSet>) -> BTreeSet<(String, ValueLabel)> {
    predictions
        .into_iter()
        .flat_map(|p| p.labels.iter().map(move |l| (p.justification_id.clone(), *l)))
        .collect()
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const SIGNIFICANCE_ALPHA: f64 = 0.05;
pub const MIN_BOOTSTRAP_ITEMS: usize = 10;
const BOOTSTRAP_SEED: u64 = 0x5EA7_B007;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub best: usize,
    /// Two-sided p-value per setting against the best one.
    pub p_values: Vec<f64>,
    /// Settings not significantly below the best (the best included).
    pub flagged: Vec<bool>,
}

/// Paired bootstrap over items comparing every setting with the best-scoring
/// one. `tallies[s][i]` is setting s on item i; all settings share item
/// order. Returns `None` with fewer than [`MIN_BOOTSTRAP_ITEMS`] items.
pub fn significance_flags(tallies: &[Vec<ConfusionTally>], resamples: usize, alpha: f64) -> Option<SignificanceResult> {
    let n = tallies.first()?.len();
    if n < MIN_BOOTSTRAP_ITEMS || tallies.iter().any(|t| t.len() != n) {
        return None;
    }
    let scores: Vec<f64> = tallies.iter().map(|t| t.iter().copied().sum::<ConfusionTally>().f1()).collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let samples: Vec<Vec<usize>> = (0..resamples)
        .map(|_| (0..n).map(|_| rng.random_range(0..n)).collect())
        .collect();
    let resampled = |t: &[ConfusionTally]| -> Vec<f64> {
        samples
            .iter()
            .map(|idx| idx.iter().map(|&i| t[i]).sum::<ConfusionTally>().f1())
            .collect()
    };
    let best_scores = resampled(&tallies[best]);
    let p_values: Vec<f64> = tallies
        .iter()
        .map(|t| {
            let other = resampled(t);
            let (mut le, mut ge) = (0usize, 0usize);
            for (b, o) in best_scores.iter().zip(&other) {
                let d = b - o;
                if d <= 0.0 {
                    le += 1;
                }
                if d >= 0.0 {
                    ge += 1;
                }
            }
            (2.0 * le.min(ge) as f64 / resamples as f64).min(1.0)
        })
        .collect();
    let flagged = p_values.iter().map(|&p| p > alpha).collect();
    Some(SignificanceResult { best, p_values, flagged })
}

/// Parse and failure counts for one (annotator, setting).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub runs: usize,
    pub failed_cells: usize,
    pub parse_clean: usize,
    pub parse_recovered: usize,
    pub parse_failed: usize,
    pub dropped_labels: usize,
    pub cached: usize,
}

impl RunDiagnostics {
    pub fn add_record(&mut self, r: &RunRecord) {
        self.runs += 1;
        if r.cached {
            self.cached += 1;
        }
        match (&r.error, &r.prediction) {
            (None, Some(p)) => {
                match p.status {
                    ParseStatus::Clean => self.parse_clean += 1,
                    ParseStatus::Recovered => self.parse_recovered += 1,
                    ParseStatus::Failed => self.parse_failed += 1,
                }
                self.dropped_labels += p.dropped.len();
            }
            _ => self.failed_cells += 1,
        }
    }
}

/// One row per (annotator, setting).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub annotator_id: String,
    pub setting: ExperimentSetting,
    pub method: String,
    pub dims: Option<String>,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub items: usize,
    /// Label change against the same annotator's ZS predictions, in percent.
    pub label_change: Option<f64>,
    pub best: bool,
    /// Not significantly below the annotator's best setting.
    pub not_sig_worse: Option<bool>,
    pub p_value: Option<f64>,
    #[serde(flatten)]
    pub diagnostics: RunDiagnostics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scoring: Granularity,
    pub rows: Vec<MetricsRow>,
    pub diagnostics: Vec<String>,
}

fn setting_rank(s: &ExperimentSetting) -> usize {
    enumerate_settings(s.value_granularity)
        .iter()
        .position(|x| x == s)
        .unwrap_or(usize::MAX)
}

/// Score every (annotator, setting) group in `predictions`.
pub fn score_predictions(
    predictions: &[PredictionSet],
    runs: &[RunRecord],
    annotations: &AnnotationSet,
    taxonomy: &TaxonomyMap,
    scoring: Granularity,
) -> Result<MetricsReport, MetricsError> {
    let mut groups: BTreeMap<(String, usize, String), Vec<&PredictionSet>> = BTreeMap::new();
    for p in predictions {
        groups
            .entry((p.annotator_id.clone(), setting_rank(&p.setting), p.setting.to_string()))
            .or_default()
            .push(p);
    }
    let mut run_diag: HashMap<(String, String), RunDiagnostics> = HashMap::new();
    for r in runs {
        run_diag
            .entry((r.annotator_id.clone(), r.setting.to_string()))
            .or_default()
            .add_record(r);
    }

    let mut report = MetricsReport {
        scoring,
        ..Default::default()
    };
    let mut cells: Vec<CellScore> = Vec::new();
    let mut zs_pairs: HashMap<String, BTreeSet<(String, ValueLabel)>> = HashMap::new();
    for ((annotator, _, setting_id), preds) in &groups {
        let cell = score_cell(preds, annotations, taxonomy, scoring)?;
        if cell.unmatched > 0 {
            report
                .diagnostics
                .push(format!("{annotator} {setting_id}: {} predictions without gold", cell.unmatched));
        }
        if cell.setting.method == Method::ZeroShot {
            zs_pairs.insert(annotator.clone(), prediction_pairs(preds.iter().copied()));
        }
        cells.push(cell);
    }

    for (cell, preds) in cells.iter().zip(groups.values()) {
        let tally = cell.tally();
        let label_change = match zs_pairs.get(&cell.annotator_id) {
            Some(zs) => {
                let change = label_change(zs, &prediction_pairs(preds.iter().copied()));
                if change.is_none() {
                    report.diagnostics.push(format!(
                        "{} {}: label change undefined, ZS predicted no labels",
                        cell.annotator_id, cell.setting
                    ));
                }
                change
            }
            None => None,
        };
        report.rows.push(MetricsRow {
            annotator_id: cell.annotator_id.clone(),
            setting: cell.setting,
            method: cell.setting.method_label(),
            dims: cell.setting.dims.map(|d| d.code().to_string()),
            f1: tally.f1(),
            tp: tally.tp,
            fp: tally.fp,
            fn_: tally.fn_,
            items: cell.items.len(),
            label_change,
            best: false,
            not_sig_worse: None,
            p_value: None,
            diagnostics: run_diag
                .get(&(cell.annotator_id.clone(), cell.setting.to_string()))
                .copied()
                .unwrap_or_default(),
        });
    }

    // Best setting and significance flags per annotator.
    let annotators: BTreeSet<String> = report.rows.iter().map(|r| r.annotator_id.clone()).collect();
    for annotator in annotators {
        let idx: Vec<usize> = (0..report.rows.len())
            .filter(|&i| report.rows[i].annotator_id == annotator)
            .collect();
        let best = idx
            .iter()
            .copied()
            .fold(None::<usize>, |acc, i| match acc {
                Some(b) if report.rows[b].f1 >= report.rows[i].f1 => Some(b),
                _ => Some(i),
            })
            .expect("annotator has rows");
        report.rows[best].best = true;

        let common: BTreeSet<&str> = idx
            .iter()
            .map(|&i| cells[i].items.iter().map(|(j, _)| j.as_str()).collect::<BTreeSet<_>>())
            .reduce(|a, b| a.intersection(&b).copied().collect())
            .unwrap_or_default();
        let tallies: Vec<Vec<ConfusionTally>> = idx
            .iter()
            .map(|&i| {
                cells[i]
                    .items
                    .iter()
                    .filter(|(j, _)| common.contains(j.as_str()))
                    .map(|(_, t)| *t)
                    .collect()
            })
            .collect();
        match significance_flags(&tallies, BOOTSTRAP_RESAMPLES, SIGNIFICANCE_ALPHA) {
            Some(sig) => {
                for (pos, &i) in idx.iter().enumerate() {
                    report.rows[i].not_sig_worse = Some(sig.flagged[pos]);
                    report.rows[i].p_value = Some(sig.p_values[pos]);
                }
            }
            None => report.diagnostics.push(format!(
                "{annotator}: significance flags skipped, {} shared justifications (need {MIN_BOOTSTRAP_ITEMS})",
                common.len()
            )),
        }
    }
    Ok(report)
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(CsvRow::from(row)).expect("csv row");
        }
        String::from_utf8(w.into_inner().expect("csv flush")).expect("csv is utf-8")
    }

    pub fn from_csv(text: &str, scoring: Granularity) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize::<CsvRow>()
            .map(|row| row.map(MetricsRow::from))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            scoring,
            rows,
            diagnostics: Vec::new(),
        })
    }

    pub fn row(&self, annotator: &str, setting: &ExperimentSetting) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.annotator_id == annotator && &r.setting == setting)
    }
}

// csv cannot serialize flattened structs, so rows go through this flat
// mirror. Cache counts are left out: they depend on cache state, not on the
// experiment.
#[derive(Serialize, Deserialize)]
struct CsvRow {
    annotator_id: String,
    setting: ExperimentSetting,
    method: String,
    dims: Option<String>,
    f1: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
    items: usize,
    label_change: Option<f64>,
    best: bool,
    not_sig_worse: Option<bool>,
    p_value: Option<f64>,
    runs: usize,
    failed_cells: usize,
    parse_clean: usize,
    parse_recovered: usize,
    parse_failed: usize,
    dropped_labels: usize,
}

impl From<&MetricsRow> for CsvRow {
    fn from(r: &MetricsRow) -> Self {
        let d = r.diagnostics;
        Self {
            annotator_id: r.annotator_id.clone(),
            setting: r.setting,
            method: r.method.clone(),
            dims: r.dims.clone(),
            f1: r.f1,
            tp: r.tp,
            fp: r.fp,
            fn_: r.fn_,
            items: r.items,
            label_change: r.label_change,
            best: r.best,
            not_sig_worse: r.not_sig_worse,
            p_value: r.p_value,
            runs: d.runs,
            failed_cells: d.failed_cells,
            parse_clean: d.parse_clean,
            parse_recovered: d.parse_recovered,
            parse_failed: d.parse_failed,
            dropped_labels: d.dropped_labels,
        }
    }
}

impl From<CsvRow> for MetricsRow {
    fn from(r: CsvRow) -> Self {
        Self {
            annotator_id: r.annotator_id,
            setting: r.setting,
            method: r.method,
            dims: r.dims,
            f1: r.f1,
            tp: r.tp,
            fp: r.fp,
            fn_: r.fn_,
            items: r.items,
            label_change: r.label_change,
            best: r.best,
            not_sig_worse: r.not_sig_worse,
            p_value: r.p_value,
            diagnostics: RunDiagnostics {
                runs: r.runs,
                failed_cells: r.failed_cells,
                parse_clean: r.parse_clean,
                parse_recovered: r.parse_recovered,
                parse_failed: r.parse_failed,
                dropped_labels: r.dropped_labels,
                cached: 0,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Annotator,
    Setting,
    Dims,
    Method,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub key: String,
    pub mean: f64,
    pub n: usize,
}

/// Unweighted mean of `value` within groups, in first-seen order. Grouping by
/// dims or method covers only settings with a dimension subset; the ZS
/// baseline is reported separately as a reference value.
pub fn aggregate(rows: &[MetricsRow], group_by: GroupBy, value: impl Fn(&MetricsRow) -> Option<f64>) -> Vec<AggregateRow> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: HashMap<String, (f64, usize)> = HashMap::new();
    for row in rows {
        let key = match group_by {
            GroupBy::Annotator => Some(row.annotator_id.clone()),
            GroupBy::Setting => Some(row.setting.to_string()),
            GroupBy::Dims => row.dims.clone(),
            GroupBy::Method => row.dims.as_ref().map(|_| row.method.clone()),
        };
        let (Some(key), Some(v)) = (key, value(row)) else {
            continue;
        };
        let entry = sums.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0.0, 0)
        });
        entry.0 += v;
        entry.1 += 1;
    }
    order
        .into_iter()
        .map(|key| {
            let (sum, n) = sums[&key];
            AggregateRow { key, mean: sum / n as f64, n }
        })
        .collect()
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub dimension: String,
    pub statistic: String,
    pub value: Option<f64>,
    pub items: usize,
    pub annotators: usize,
    /// Labels without variance (multi-label) or items dropped (sentiment).
    pub excluded: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub rows: Vec<AgreementRow>,
    /// Justifications not annotated by every annotator, left out of all rows.
    pub incomplete_items: usize,
}

impl AgreementReport {
    pub fn value(&self, dimension: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.dimension == dimension).and_then(|r| r.value)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:<18} {:>9} {:>6} {:>10} {:>9}\n", "dimension", "statistic", "value", "items", "annotators", "excluded");
        for r in &self.rows {
            let value = r.value.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            out.push_str(&format!(
                "{:<10} {:<18} {:>9} {:>6} {:>10} {:>9}\n",
                r.dimension, r.statistic, value, r.items, r.annotators, r.excluded
            ));
        }
        out
    }
}

/// Agreement on every SEAT dimension and on values, over justifications
/// annotated by all annotators. Values are compared at `values_at`.
pub fn agreement(
    annotations: &AnnotationSet,
    corpus: &Corpus,
    taxonomy: &TaxonomyMap,
    values_at: Granularity,
) -> Result<AgreementReport, MetricsError> {
    let annotators: Vec<&str> = annotations.annotator_ids().collect();
    if annotators.len() < 2 {
        return Err(MetricsError::Agreement("fewer than two annotators".into()));
    }
    let mut rows_by_item: Vec<(&str, Vec<&SeatRecord>)> = Vec::new();
    let mut incomplete = 0;
    for j in corpus.iter() {
        let recs: Vec<&SeatRecord> = annotators.iter().filter_map(|a| annotations.get(a, &j.id)).collect();
        if recs.len() == annotators.len() {
            rows_by_item.push((&j.text, recs));
        } else if !recs.is_empty() {
            incomplete += 1;
        }
    }
    if rows_by_item.is_empty() {
        return Err(MetricsError::Agreement("no justification annotated by every annotator".into()));
    }
    let n_items = rows_by_item.len();
    let n_ann = annotators.len();
    let mut rows = Vec::new();

    let sentiment_items: Vec<Vec<Sentiment>> = rows_by_item
        .iter()
        .filter_map(|(_, recs)| recs.iter().map(|r| r.sentiment).collect::<Option<Vec<_>>>())
        .collect();
    let sentiment = if sentiment_items.is_empty() {
        None
    } else {
        fleiss_kappa_labels(&sentiment_items)?.kappa
    };
    rows.push(AgreementRow {
        dimension: "sentiment".into(),
        statistic: "fleiss_kappa".into(),
        value: sentiment,
        items: sentiment_items.len(),
        annotators: n_ann,
        excluded: n_items - sentiment_items.len(),
    });

    let emotions: Vec<Vec<BTreeSet<Emotion>>> =
        rows_by_item.iter().map(|(_, recs)| recs.iter().map(|r| r.emotions.clone()).collect()).collect();
    let k = multilabel_kappa(&emotions, &Emotion::all().collect::<Vec<_>>())?;
    rows.push(AgreementRow {
        dimension: "emotion".into(),
        statistic: "multilabel_kappa".into(),
        value: k.kappa,
        items: n_items,
        annotators: n_ann,
        excluded: k.excluded,
    });

    let spans: Vec<SpanItem> = rows_by_item
        .iter()
        .map(|(text, recs)| {
            let raters: Vec<&[ArgumentSpan]> = recs.iter().map(|r| r.argument.as_slice()).collect();
            SpanItem::from_records(text, &raters)
        })
        .collect();
    rows.push(AgreementRow {
        dimension: "argument".into(),
        statistic: "pairwise_span_f1".into(),
        value: Some(pairwise_span_f1(&spans)?),
        items: n_items,
        annotators: n_ann,
        excluded: 0,
    });

    let topics: Vec<Vec<BTreeSet<Topic>>> =
        rows_by_item.iter().map(|(_, recs)| recs.iter().map(|r| r.topics.clone()).collect()).collect();
    let k = multilabel_kappa(&topics, &Topic::all().collect::<Vec<_>>())?;
    rows.push(AgreementRow {
        dimension: "topic".into(),
        statistic: "multilabel_kappa".into(),
        value: k.kappa,
        items: n_items,
        annotators: n_ann,
        excluded: k.excluded,
    });

    let values: Vec<Vec<BTreeSet<ValueLabel>>> = rows_by_item
        .iter()
        .map(|(_, recs)| recs.iter().map(|r| gold_labels(r, taxonomy, values_at)).collect())
        .collect();
    let mut inventory: BTreeSet<ValueLabel> = match values_at {
        Granularity::Leaf => ValueLeaf::all().map(ValueLabel::Leaf).collect(),
        Granularity::Parent => Granularity::Parent.labels().into_iter().collect(),
    };
    inventory.extend(values.iter().flatten().flatten().copied());
    let k = multilabel_kappa(&values, &inventory.into_iter().collect::<Vec<_>>())?;
    rows.push(AgreementRow {
        dimension: "values".into(),
        statistic: "multilabel_kappa".into(),
        value: k.kappa,
        items: n_items,
        annotators: n_ann,
        excluded: k.excluded,
    });

    Ok(AgreementReport {
        rows,
        incomplete_items: incomplete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn set(items: &[u32]) -> BTreeSet<u32> {
        items.iter().copied().collect()
    }

    #[test]
    fn micro_f1_half() {
        let (p, g) = (set(&[1, 2]), set(&[2, 3]));
        assert_abs_diff_eq!(micro_f1([(&p, &g)]), 0.5);
    }

    #[test]
    fn micro_f1_perfect_and_empty() {
        let a = set(&[1, 4]);
        assert_eq!(micro_f1([(&a, &a)]), 1.0);
        let e = set(&[]);
        assert_eq!(micro_f1([(&e, &e)]), 1.0);
        assert_eq!(micro_f1([(&e, &a)]), 0.0);
    }

    #[test]
    fn fleiss_perfect_agreement() {
        let k = fleiss_kappa_labels(&[vec!["a", "a", "a"], vec!["b", "b", "b"]]).unwrap();
        assert_eq!(k.kappa, Some(1.0));
    }

    #[test]
    fn fleiss_single_category_is_degenerate() {
        let k = fleiss_kappa_labels(&[vec!["a", "a"], vec!["a", "a"]]).unwrap();
        assert!(k.is_degenerate());
    }

    #[test]
    fn fleiss_rejects_ragged_input() {
        assert!(fleiss_kappa(&[vec![2, 1], vec![1, 1]]).is_err());
        assert!(fleiss_kappa(&[vec![1, 0]]).is_err());
        assert!(fleiss_kappa(&[]).is_err());
    }

    #[test]
    fn duplicated_item_keeps_kappa() {
        let base = vec![vec![2, 1, 0], vec![0, 2, 1], vec![1, 1, 1]];
        let mut dup = base.clone();
        dup.push(base[0].clone());
        dup.push(base[1].clone());
        dup.push(base[2].clone());
        let a = fleiss_kappa(&base).unwrap().kappa.unwrap();
        let b = fleiss_kappa(&dup).unwrap().kappa.unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn multilabel_identical_sets() {
        let items = vec![
            vec![set(&[1]), set(&[1])],
            vec![set(&[2]), set(&[2])],
        ];
        let k = multilabel_kappa(&items, &[1, 2, 3]).unwrap();
        assert_eq!(k.kappa, Some(1.0));
        assert_eq!(k.excluded, 1);
    }

    #[test]
    fn tokens_overlapping_spans() {
        let text = "wind power is  cheap";
        assert_eq!(covered_tokens(text, &[(0, 4)]), [0].into_iter().collect());
        assert_eq!(covered_tokens(text, &[(3, 6)]), [0, 1].into_iter().collect());
        assert_eq!(covered_tokens(text, &[(14, 20)]), [3].into_iter().collect());
        assert!(covered_tokens(text, &[]).is_empty());
    }

    #[test]
    fn span_f1_identical_and_empty_prediction() {
        let same = SpanItem {
            text: "a b c".into(),
            spans: vec![vec![(0, 3)], vec![(0, 3)]],
        };
        assert_eq!(pairwise_span_f1(&[same]).unwrap(), 1.0);
        let one_sided = SpanItem {
            text: "a b c".into(),
            spans: vec![vec![(0, 3)], vec![]],
        };
        assert_eq!(pairwise_span_f1(&[one_sided]).unwrap(), 0.0);
    }

    #[test]
    fn label_change_cases() {
        let a = set(&[1, 2]);
        assert_eq!(label_change(&a, &a), Some(0.0));
        assert_eq!(label_change(&set(&[1]), &set(&[2])), Some(200.0));
        assert_eq!(label_change(&set(&[]), &a), None);
    }

    #[test]
    fn significance_self_and_identical() {
        let t = |tp, fp| ConfusionTally { tp, fp, fn_: 1 };
        let a: Vec<ConfusionTally> = (0..12).map(|i| t(i % 3, 1)).collect();
        let sig = significance_flags(&[a.clone(), a.clone()], 500, 0.05).unwrap();
        assert_eq!(sig.flagged, [true, true]);
        assert!(significance_flags(&[a[..5].to_vec()], 500, 0.05).is_none());
    }

    #[test]
    fn significance_dominated_setting() {
        let good: Vec<ConfusionTally> = (0..20).map(|_| ConfusionTally { tp: 3, fp: 0, fn_: 0 }).collect();
        let bad: Vec<ConfusionTally> = (0..20).map(|_| ConfusionTally { tp: 0, fp: 2, fn_: 3 }).collect();
        let sig = significance_flags(&[bad, good], 1000, 0.05).unwrap();
        assert_eq!(sig.best, 1);
        assert_eq!(sig.flagged, [false, true]);
    }

    #[test]
    fn aggregate_means() {
        let row = |a: &str, s: &str, f1: f64| MetricsRow {
            annotator_id: a.into(),
            setting: s.parse().unwrap(),
            method: s.parse::<ExperimentSetting>().unwrap().method_label(),
            dims: s.parse::<ExperimentSetting>().unwrap().dims.map(|d| d.code().to_string()),
            f1,
            tp: 0,
            fp: 0,
            fn_: 0,
            items: 0,
            label_change: None,
            best: false,
            not_sig_worse: None,
            p_value: None,
            diagnostics: RunDiagnostics::default(),
        };
        let zs = [0.164, 0.244, 0.230, 0.221, 0.228];
        let rows: Vec<MetricsRow> = zs.iter().enumerate().map(|(i, f)| row(&format!("a{i}"), "ZS", *f)).collect();
        let agg = aggregate(&rows, GroupBy::Setting, |r| Some(r.f1));
        assert_eq!(agg.len(), 1);
        assert_abs_diff_eq!(agg[0].mean, 0.217, epsilon = 5e-4);
        assert!(aggregate(&rows, GroupBy::Method, |r| Some(r.f1)).is_empty());
        let single = aggregate(&rows[..1], GroupBy::Annotator, |r| Some(r.f1));
        assert_eq!(single[0].mean, 0.164);
    }
}
