//! Presentation of metrics: the per-annotator results table, whitespace
//! columnar figure data, the agreement table and a diagnostics summary.
//! Nothing here computes a score; every number comes from a
//! [`MetricsReport`] row or a [`metrics::aggregate`] over rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::llm::write_atomic;
use crate::metrics::{self, AgreementReport, GroupBy, MetricsReport, MetricsRow, RunDiagnostics};
use crate::prompting::{DimensionSubset, ExperimentSetting, Method, FEW_SHOT_KS};

pub const DIM_COLUMNS: [(&str, DimensionSubset); 5] = [
    ("Sentiment", DimensionSubset::Sentiment),
    ("Emotion", DimensionSubset::Emotion),
    ("Argument", DimensionSubset::Argument),
    ("Topic", DimensionSubset::Topic),
    ("All", DimensionSubset::All),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Figure {
    AuxInfo,
    ByAnnotatorDims,
    ByAnnotatorK,
    LabelChange,
}

impl Figure {
    pub const ALL: [Figure; 4] = [Figure::AuxInfo, Figure::ByAnnotatorDims, Figure::ByAnnotatorK, Figure::LabelChange];

    pub fn name(self) -> &'static str {
        match self {
            Figure::AuxInfo => "aux-info",
            Figure::ByAnnotatorDims => "by-annotator-dims",
            Figure::ByAnnotatorK => "by-annotator-k",
            Figure::LabelChange => "label-change",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.dat", self.name())
    }
}

/// Series name of a non-baseline setting: `OS`, `FS-5`, ...
fn series(setting: &ExperimentSetting) -> Option<String> {
    match setting.method {
        Method::ZeroShot => None,
        Method::OneShot => Some("OS".to_string()),
        Method::FewShot => Some(format!("FS-{}", setting.total_examples())),
    }
}

fn method_series() -> Vec<String> {
    let mut s = vec!["OS".to_string()];
    s.extend(FEW_SHOT_KS.iter().map(|k| format!("FS-{}", k + 1)));
    s
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |v| format!("{v:.4}"))
}

fn annotators(rows: &[MetricsRow]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for r in rows {
        if !seen.contains(&r.annotator_id) {
            seen.push(r.annotator_id.clone());
        }
    }
    seen
}

/// Mean of `value` over rows matching `pick`, via [`metrics::aggregate`].
fn mean_where(rows: &[MetricsRow], pick: impl Fn(&MetricsRow) -> bool, value: impl Fn(&MetricsRow) -> Option<f64>) -> Option<f64> {
    let subset: Vec<MetricsRow> = rows.iter().filter(|r| pick(r)).cloned().collect();
    metrics::aggregate(&subset, GroupBy::Setting, &value)
        .into_iter()
        .map(|a| (a.mean * a.n as f64, a.n))
        .reduce(|a, b| (a.0 + b.0, a.1 + b.1))
        .map(|(sum, n)| sum / n as f64)
}

fn columnar(header: &[String], body: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| -> String {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join(" ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    for row in &body {
        out.push_str(&line(row));
    }
    out
}

pub fn figure_data(report: &MetricsReport, figure: Figure) -> String {
    let rows = &report.rows;
    let f1 = |r: &MetricsRow| Some(r.f1);
    let change = |r: &MetricsRow| r.label_change;
    let is_zs = |r: &MetricsRow| r.setting.method == Method::ZeroShot;
    let zs_mean = mean_where(rows, is_zs, f1);
    let series_names = method_series();
    match figure {
        Figure::AuxInfo | Figure::LabelChange => {
            let value: &dyn Fn(&MetricsRow) -> Option<f64> = if figure == Figure::AuxInfo { &f1 } else { &change };
            let mut header: Vec<String> = vec!["x".into(), "dims".into()];
            header.extend(series_names.iter().cloned());
            if figure == Figure::AuxInfo {
                header.push("ZS".into());
            }
            let body = DIM_COLUMNS
                .iter()
                .enumerate()
                .map(|(x, (_, dims))| {
                    let mut cells = vec![x.to_string(), dims.code().to_string()];
                    for s in &series_names {
                        cells.push(fmt_value(mean_where(
                            rows,
                            |r| r.setting.dims == Some(*dims) && series(&r.setting).as_ref() == Some(s),
                            value,
                        )));
                    }
                    if figure == Figure::AuxInfo {
                        cells.push(fmt_value(zs_mean));
                    }
                    cells
                })
                .collect();
            columnar(&header, body)
        }
        Figure::ByAnnotatorDims => {
            let mut header: Vec<String> = vec!["x".into(), "annotator".into()];
            header.extend(DIM_COLUMNS.iter().map(|(_, d)| d.code().to_string()));
            let body = annotators(rows)
                .iter()
                .enumerate()
                .map(|(x, a)| {
                    let mut cells = vec![x.to_string(), a.clone()];
                    for (_, dims) in DIM_COLUMNS {
                        cells.push(fmt_value(mean_where(
                            rows,
                            |r| &r.annotator_id == a && r.setting.dims == Some(dims),
                            f1,
                        )));
                    }
                    cells
                })
                .collect();
            columnar(&header, body)
        }
        Figure::ByAnnotatorK => {
            let mut header: Vec<String> = vec!["x".into(), "annotator".into(), "ZS".into()];
            header.extend(series_names.iter().cloned());
            let body = annotators(rows)
                .iter()
                .enumerate()
                .map(|(x, a)| {
                    let mut cells = vec![x.to_string(), a.clone()];
                    cells.push(fmt_value(mean_where(rows, |r| &r.annotator_id == a && is_zs(r), f1)));
                    for s in &series_names {
                        cells.push(fmt_value(mean_where(
                            rows,
                            |r| &r.annotator_id == a && series(&r.setting).as_ref() == Some(s),
                            f1,
                        )));
                    }
                    cells
                })
                .collect();
            columnar(&header, body)
        }
    }
}

/// `**v**` marks the best cell of a block, `_v_` a cell not significantly
/// below it.
fn mark(row: &MetricsRow) -> String {
    let v = format!("{:.3}", row.f1);
    if row.best {
        format!("**{v}**")
    } else if row.not_sig_worse == Some(true) {
        format!("_{v}_")
    } else {
        v
    }
}

fn method_rows() -> Vec<(String, Option<usize>)> {
    let mut rows = vec![("One-shot".to_string(), None)];
    rows.extend(FEW_SHOT_KS.iter().map(|k| (format!("Few-shot ({})", k + 1), Some(*k))));
    rows
}

/// One block per annotator; rows are methods, columns dimension subsets.
/// With `audit`, each cell is followed by a provenance listing naming the
/// metrics row it came from.
pub fn results_table(report: &MetricsReport, audit: bool) -> String {
    if report.rows.is_empty() {
        return String::new();
    }
    const W: usize = 11;
    let mut out = String::new();
    let mut provenance = Vec::new();
    let header = format!("{:<10} {:<14}", "ID", "Method");
    let _ = write!(out, "{header}");
    for (name, _) in DIM_COLUMNS {
        let _ = write!(out, " {name:>W$}");
    }
    out.push('\n');
    let rule = "-".repeat(header.len() + DIM_COLUMNS.len() * (W + 1));
    out.push_str(&rule);
    out.push('\n');
    let find = |a: &str, m: &str, k: Option<usize>, d: DimensionSubset| {
        report.rows.iter().find(|r| {
            r.annotator_id == a
                && r.setting.dims == Some(d)
                && r.setting.method != Method::ZeroShot
                && (r.setting.method == Method::OneShot) == (m == "One-shot")
                && r.setting.k == k
        })
    };
    for annotator in annotators(&report.rows) {
        for (i, (method, k)) in method_rows().into_iter().enumerate() {
            let id = if i == 0 { annotator.as_str() } else { "" };
            let _ = write!(out, "{id:<10} {method:<14}");
            for (col, dims) in DIM_COLUMNS {
                let cell = match find(&annotator, &method, k, dims) {
                    Some(row) => {
                        provenance.push(format!(
                            "{annotator} | {method} | {col} <- annotator_id={} setting={} field=f1",
                            row.annotator_id, row.setting
                        ));
                        mark(row)
                    }
                    None => "-".to_string(),
                };
                let _ = write!(out, " {cell:>W$}");
            }
            out.push('\n');
        }
        let baseline = report
            .rows
            .iter()
            .find(|r| r.annotator_id == annotator && r.setting.method == Method::ZeroShot);
        let cell = baseline.map_or("-".to_string(), mark);
        if let Some(row) = baseline {
            provenance.push(format!(
                "{annotator} | Baseline <- annotator_id={} setting={} field=f1",
                row.annotator_id, row.setting
            ));
        }
        let span = DIM_COLUMNS.len() * (W + 1);
        let _ = writeln!(out, "{:<10} {:<14}{:^span$}", "", "Baseline", cell);
        out.push_str(&rule);
        out.push('\n');
    }
    if audit {
        out.push_str("\nprovenance:\n");
        for p in provenance {
            out.push_str(&p);
            out.push('\n');
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DiagnosticsSummary {
    pub scoring: String,
    pub rows: usize,
    #[serde(flatten)]
    pub totals: RunDiagnostics,
    pub parse_failure_rate: Option<f64>,
    pub notes: Vec<String>,
}

pub fn diagnostics_summary(report: &MetricsReport) -> DiagnosticsSummary {
    let mut totals = RunDiagnostics::default();
    for r in &report.rows {
        let d = r.diagnostics;
        totals.runs += d.runs;
        totals.failed_cells += d.failed_cells;
        totals.parse_clean += d.parse_clean;
        totals.parse_recovered += d.parse_recovered;
        totals.parse_failed += d.parse_failed;
        totals.dropped_labels += d.dropped_labels;
        totals.cached += d.cached;
    }
    let parsed = totals.parse_clean + totals.parse_recovered + totals.parse_failed;
    DiagnosticsSummary {
        scoring: report.scoring.as_str().to_string(),
        rows: report.rows.len(),
        totals,
        parse_failure_rate: (parsed > 0).then(|| totals.parse_failed as f64 / parsed as f64),
        notes: report.diagnostics.clone(),
    }
}

/// Every artifact the `report` command writes, keyed by file name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportBundle {
    pub files: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn build(report: &MetricsReport, agreement: Option<&AgreementReport>, audit: bool) -> Self {
        let mut files = BTreeMap::new();
        files.insert("results.txt".to_string(), results_table(report, audit));
        for f in Figure::ALL {
            files.insert(f.file_name(), figure_data(report, f));
        }
        if let Some(a) = agreement {
            files.insert("agreement.txt".to_string(), a.to_table());
        }
        let summary = serde_json::to_string_pretty(&diagnostics_summary(report)).expect("summary serializes") + "\n";
        files.insert("diagnostics.json".to_string(), summary);
        Self { files }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, content) in &self.files {
            write_atomic(&dir.join(name), content.as_bytes())?;
        }
        Ok(())
    }
}
