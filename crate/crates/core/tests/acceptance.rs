//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criterion 1 reads real annotation files from the directory named by
//! `SEAT_PUBLIC_ANNOTATIONS` (containing `corpus.jsonl` and
//! `annotations.jsonl`); without it the criterion is reported as replaced
//! by the metric fixtures of criterion 2.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use seat_core::corpus::{AnnotationSet, Corpus};
use seat_core::llm::{LlmClient, MockProvider, MockSpec};
use seat_core::metrics::{self, fleiss_kappa_labels, label_change, micro_f1, MetricsReport};
use seat_core::orchestrator::{self, vote, ExperimentInputs, ExperimentPlan, RunRecord};
use seat_core::parsing::{extract_list, format_list, parse_response, ParseStatus, ParsedPrediction};
use seat_core::prompting::{build_prompt, enumerate_settings, Dimension, DimensionSubset, ExperimentSetting, Method};
use seat_core::retrieval::{knn, EmbeddingIndex};
use seat_core::synthetic::{self, SyntheticSpec};
use seat_core::taxonomy::{ValueLabel, VALUE_CATEGORIES, VALUE_LEAVES};
use seat_core::{Granularity, TaxonomyMap};

type Outcome = Result<String, String>;

fn ensure(cond: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

// ---------------------------------------------------------------- criterion 1

const AGREEMENT_TARGETS: [(&str, f64, f64); 5] = [
    ("topic", 0.514, 0.01),
    ("sentiment", 0.17, 0.01),
    ("values", 0.0144, 0.005),
    ("emotion", 0.00365, 0.005),
    ("argument", 0.2447, 0.03),
];

fn agreement_replication(dir: &Path) -> Outcome {
    let corpus = Corpus::load(&dir.join("corpus.jsonl")).map_err(|e| e.to_string())?;
    let annotations =
        AnnotationSet::load(&dir.join("annotations.jsonl"), &corpus, None).map_err(|e| e.to_string())?;
    let report = metrics::agreement(&annotations, &corpus, &TaxonomyMap::builtin(), Granularity::Leaf)
        .map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    let mut failures = Vec::new();
    for (dim, target, tol) in AGREEMENT_TARGETS {
        let got = report.value(dim);
        detail.push(format!("{dim}={}", got.map_or("n/a".into(), |v| format!("{v:.4}"))));
        if !got.is_some_and(|v| close(v, target, tol)) {
            failures.push(format!("{dim}: {got:?} vs {target} +/- {tol}"));
        }
    }
    if failures.is_empty() {
        Ok(detail.join(" "))
    } else {
        Err(failures.join("; "))
    }
}

// ---------------------------------------------------------------- criterion 2

#[derive(Deserialize)]
struct FleissFixture {
    ratings: Vec<Vec<String>>,
    kappa: f64,
}

fn metric_oracles() -> Outcome {
    let f: FleissFixture = serde_json::from_str(include_str!("fixtures/fleiss_hand.json")).unwrap();
    let k = fleiss_kappa_labels(&f.ratings).map_err(|e| e.to_string())?.kappa;
    ensure(k.is_some_and(|k| close(k, f.kappa, 1e-9)), || format!("hand fixture: {k:?} vs {}", f.kappa))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xF1);
    for n in 0..200 {
        let items = rng.random_range(1..=6);
        let raters = rng.random_range(2..=4);
        let cats = rng.random_range(1..=3);
        let ratings: Vec<Vec<usize>> =
            (0..items).map(|_| (0..raters).map(|_| rng.random_range(0..cats)).collect()).collect();
        let got = fleiss_kappa_labels(&ratings).map_err(|e| e.to_string())?.kappa;
        let want = common::fleiss_by_pairs(&ratings);
        let same = match (got, want) {
            (Some(a), Some(b)) => close(a, b, 1e-9),
            (a, b) => a == b,
        };
        ensure(same, || format!("fleiss instance {n}: {got:?} vs {want:?} on {ratings:?}"))?;
    }

    let set = |rng: &mut ChaCha8Rng| -> BTreeSet<u32> { (0..8).filter(|_| rng.random_bool(0.3)).collect() };
    for n in 0..200 {
        let len = rng.random_range(1..10);
        let items: Vec<(BTreeSet<u32>, BTreeSet<u32>)> = (0..len).map(|_| (set(&mut rng), set(&mut rng))).collect();
        let got = micro_f1(items.iter().map(|(p, g)| (p, g)));
        let want = common::micro_f1_by_cells(&items, 8);
        ensure(close(got, want, 1e-12), || format!("micro F1 instance {n}: {got} vs {want}"))?;
    }

    for n in 0..200 {
        let pairs = |rng: &mut ChaCha8Rng| -> BTreeSet<(u32, u32)> {
            (0..5).flat_map(|j| (0..6).map(move |l| (j, l))).filter(|_| rng.random_bool(0.25)).collect()
        };
        let (a, b) = (pairs(&mut rng), pairs(&mut rng));
        let (got, want) = (label_change(&a, &b), common::label_change_by_union(&a, &b));
        ensure(got == want, || format!("label change instance {n}: {got:?} vs {want:?}"))?;
    }
    Ok("hand fixture exact; 200 fleiss, 200 micro F1, 200 label change instances agree".into())
}

// ---------------------------------------------------------------- criterion 3

fn category(i: u32) -> ValueLabel {
    ValueLabel::from_name(VALUE_CATEGORIES[i as usize]).unwrap()
}

fn seed_record(seed: u64, labels: &BTreeSet<u32>) -> RunRecord {
    RunRecord {
        annotator_id: "a".into(),
        setting: "ZS".parse().unwrap(),
        justification_id: "j".into(),
        seed,
        cache_key: None,
        raw_response: None,
        prediction: Some(ParsedPrediction {
            status: ParseStatus::Clean,
            labels: labels.iter().map(|&l| category(l)).collect(),
            raw_items: labels.iter().map(|&l| VALUE_CATEGORIES[l as usize].to_string()).collect(),
            accepted: labels.len(),
            dropped: vec![],
            notes: vec![],
        }),
        error: None,
        cached: false,
        retries: 0,
        latency_ms: 0,
    }
}

fn vote_sets(per_seed: &[BTreeSet<u32>]) -> Result<BTreeSet<ValueLabel>, String> {
    let records: Vec<RunRecord> = per_seed.iter().zip(1..).map(|(s, seed)| seed_record(seed, s)).collect();
    let refs: Vec<&RunRecord> = records.iter().collect();
    vote(&refs, &orchestrator::DEFAULT_SEEDS, orchestrator::DEFAULT_VOTE_THRESHOLD)
        .map(|p| p.labels)
        .map_err(|e| e.to_string())
}

fn voting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x707E);
    for n in 0..500 {
        let universe = rng.random_range(1..=10);
        let p = rng.random_range(0.1..0.9);
        let per_seed: Vec<BTreeSet<u32>> =
            (0..5).map(|_| (0..universe).filter(|_| rng.random_bool(p)).collect()).collect();
        let got = vote_sets(&per_seed)?;
        let want: BTreeSet<ValueLabel> =
            common::vote_by_counting(&per_seed, 3, universe).into_iter().map(category).collect();
        ensure(got == want, || format!("instance {n}: {got:?} vs {want:?}"))?;
    }
    let with = BTreeSet::from([0]);
    let without = BTreeSet::new();
    let three = vote_sets(&[with.clone(), with.clone(), with.clone(), without.clone(), without.clone()])?;
    ensure(three == BTreeSet::from([category(0)]), || format!("support 3 gave {three:?}"))?;
    let two = vote_sets(&[with.clone(), with, without.clone(), without.clone(), without])?;
    ensure(two.is_empty(), || format!("support 2 gave {two:?}"))?;
    Ok("500 instances agree; support 3 kept, support 2 dropped".into())
}

// ---------------------------------------------------------------- criterion 4

fn retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4E4E);
    for n in 0..100 {
        let mut vectors = BTreeMap::new();
        for i in 0..50 {
            let v: Vec<f64> = if i > 0 && rng.random_bool(0.1) {
                vectors.values().next().cloned().unwrap()
            } else {
                (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            vectors.insert(format!("v{i:02}"), v);
        }
        let index = EmbeddingIndex::new(vectors.clone(), "random").map_err(|e| e.to_string())?;
        let query = format!("v{:02}", rng.random_range(0..50));
        let ids = |k| -> Result<Vec<String>, String> {
            Ok(knn(&index, &query, k).map_err(|e| e.to_string())?.into_iter().map(|n| n.justification_id).collect())
        };
        let full = ids(14)?;
        let want = common::knn_exhaustive(&vectors, &query, 14);
        ensure(full == want, || format!("index {n}: {full:?} vs {want:?}"))?;
        for k in [4, 9] {
            let prefix = ids(k)?;
            ensure(prefix == full[..k], || format!("index {n}: K={k} is not a prefix of K=14"))?;
        }
    }
    Ok("100 indices match exhaustive ranking; prefix property for K in {4, 9, 14}".into())
}

// ---------------------------------------------------------------- criterion 5

const GOLDEN: [(&str, &str); 4] = [
    ("ZS", "zs.txt"),
    ("OS-E", "os_e.txt"),
    ("OS-all", "os_all.txt"),
    ("FS-5-all", "fs5_all.txt"),
];

fn render(
    setting: &ExperimentSetting,
    annotator: &str,
    reference: &str,
    corpus: &Corpus,
    annotations: &AnnotationSet,
    index: &EmbeddingIndex,
    taxonomy: &TaxonomyMap,
) -> Result<String, String> {
    let neighbors = knn(index, reference, 14).map_err(|e| e.to_string())?;
    build_prompt(setting, annotator, reference, corpus, annotations, &neighbors, taxonomy)
        .map(|b| b.render())
        .map_err(|e| e.to_string())
}

fn prompt_correctness() -> Outcome {
    let taxonomy = TaxonomyMap::builtin();
    let (corpus, annotations) = common::bundled();
    let index = common::hash_index(&corpus, 64);
    for (name, file) in GOLDEN {
        let text = render(&name.parse().unwrap(), "s1", "syn-001", &corpus, &annotations, &index, &taxonomy)?;
        let expected = std::fs::read_to_string(manifest_dir().join("tests/golden").join(file)).map_err(|e| e.to_string())?;
        ensure(text == expected, || format!("{name} differs from golden file {file}"))?;
    }

    let settings = enumerate_settings(Granularity::Parent);
    ensure(settings.len() == 21, || format!("{} settings", settings.len()))?;
    let zs = settings.iter().filter(|s| s.method == Method::ZeroShot).count();
    let os = settings.iter().filter(|s| s.method == Method::OneShot).count();
    ensure(zs == 1 && os == 5, || format!("{zs} zero-shot and {os} one-shot settings"))?;

    for setting in &settings {
        let text = render(setting, "s3", "syn-004", &corpus, &annotations, &index, &taxonomy)?;
        let sentences = text.lines().filter(|l| l.starts_with("Sentence: ")).count();
        ensure(sentences == setting.demonstrations() + 1, || format!("{setting}: {sentences} sentences"))?;
        let shown: Vec<&str> = Dimension::ALL
            .iter()
            .map(|d| d.name())
            .filter(|name| text.contains(&format!("{name} Annotations for this sentence:")))
            .collect();
        let ok = match setting.dims {
            None => shown.is_empty(),
            Some(DimensionSubset::All) => shown.len() == 4,
            Some(d) => shown == [d.dimensions()[0].name()],
        };
        ensure(ok, || format!("{setting}: dimensions shown {shown:?}"))?;
    }

    // Leaf-level annotations with a distinct value per item, so a leak of the
    // reference's answer line is unambiguous.
    let (corpus, annotations) = synthetic::generate(SyntheticSpec {
        items: 30,
        annotators: 2,
        seed: 13,
    });
    let index = common::hash_index(&corpus, 64);
    let mut records: Vec<_> = annotations.records().cloned().collect();
    for (i, r) in records.iter_mut().enumerate() {
        r.values = BTreeSet::from([ValueLabel::from_name(VALUE_LEAVES[i % VALUE_LEAVES.len()]).unwrap()]);
    }
    let unique: AnnotationSet = AnnotationSet::new(records, &corpus, None).map_err(|e| e.to_string())?;
    let leaf_settings = enumerate_settings(Granularity::Leaf);
    for j in corpus.iter() {
        for annotator in ["s1", "s2"] {
            let gold = unique.get(annotator, &j.id).unwrap();
            let answer = format!("Values: {}", format_list(&gold.values.iter().map(|v| v.to_string()).collect::<Vec<_>>()));
            for setting in &leaf_settings {
                let text = render(setting, annotator, &j.id, &corpus, &unique, &index, &taxonomy)?;
                ensure(!text.lines().any(|l| l.trim() == answer), || {
                    format!("{setting} {annotator} {}: reference answer line present", j.id)
                })?;
            }
        }
    }
    Ok(format!("4 golden files match; 21 settings; structure holds for {} leaf prompts", 30 * 2 * leaf_settings.len()))
}

// ---------------------------------------------------------------- criteria 6, 7, 9

fn default_run(corpus: &Corpus, annotations: &AnnotationSet, out: &Path) -> Result<(orchestrator::RunOutput, MetricsReport), String> {
    let taxonomy = TaxonomyMap::builtin();
    let index = common::hash_index(corpus, 384);
    let plan = ExperimentPlan::default_for(annotations, out);
    let inputs = ExperimentInputs {
        corpus,
        annotations,
        taxonomy: &taxonomy,
        index: Some(&index),
    };
    let client = LlmClient::new(MockProvider::new(MockSpec::noisy_default()));
    let output = orchestrator::run_plan(&plan, &inputs, &client, false).map_err(|e| e.to_string())?;
    let report = metrics::score_predictions(&output.predictions, &output.records, annotations, &taxonomy, plan.scoring)
        .map_err(|e| e.to_string())?;
    Ok((output, report))
}

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
    }
    files
}

fn end_to_end_determinism() -> Outcome {
    let (corpus, annotations) = common::bundled();
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (output, report) = default_run(&corpus, &annotations, dir.path())?;
        ensure(output.summary.failed == 0, || format!("{} failed cells", output.summary.failed))?;
        snapshots.push((tree_bytes(&dir.path().join("predictions")), report.to_csv(), output.predictions.len()));
    }
    let (a, b) = (&snapshots[0], &snapshots[1]);
    ensure(a.0.len() == 105, || format!("{} prediction files", a.0.len()))?;
    ensure(a.0 == b.0, || "prediction files differ between runs".into())?;
    ensure(a.1 == b.1, || "metrics CSV differs between runs".into())?;
    Ok(format!("{} prediction sets and metrics CSV byte-identical across two runs", a.2))
}

fn directional_sanity() -> Outcome {
    let (corpus, annotations) = synthetic::generate(SyntheticSpec {
        items: 40,
        annotators: 5,
        seed: 11,
    });
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (_, report) = default_run(&corpus, &annotations, dir.path())?;
    let f1 = |a: &str, s: &str| -> Result<f64, String> {
        report
            .row(a, &s.parse().unwrap())
            .map(|r| r.f1)
            .ok_or_else(|| format!("no row for {a} {s}"))
    };
    let mut detail = Vec::new();
    for a in annotations.annotator_ids() {
        let (fs, zs) = (f1(a, "FS-5-all")?, f1(a, "ZS")?);
        ensure(fs > zs, || format!("{a}: FS-5-all {fs:.3} not above ZS {zs:.3}"))?;
        for k in [5, 10, 15] {
            let all = f1(a, &format!("FS-{k}-all"))?;
            for d in ["S", "E", "A", "T"] {
                let single = f1(a, &format!("FS-{k}-{d}"))?;
                ensure(all >= single - 1e-12, || format!("{a}: FS-{k}-all {all:.4} below FS-{k}-{d} {single:.4}"))?;
            }
        }
        detail.push(format!("{a} {fs:.3}>{zs:.3}"));
    }
    Ok(detail.join(", "))
}

fn plan_arithmetic() -> Outcome {
    let (corpus, annotations) = synthetic::generate(SyntheticSpec {
        items: 50,
        annotators: 5,
        seed: 50,
    });
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let plan = ExperimentPlan::default_for(&annotations, dir.path());
    ensure(plan.experiments() == 105, || format!("{} experiments", plan.experiments()))?;
    ensure(plan.expected_records(50) == 26_250, || format!("{} expected records", plan.expected_records(50)))?;
    let (output, _) = default_run(&corpus, &annotations, dir.path())?;
    ensure(output.records.len() == 26_250, || format!("{} records", output.records.len()))?;
    let stored = orchestrator::load_run_records(dir.path()).map_err(|e| e.to_string())?.len();
    ensure(stored == 26_250, || format!("{stored} records on disk"))?;
    Ok("26250 run records produced and persisted".into())
}

// ---------------------------------------------------------------- criterion 8

#[derive(Deserialize)]
struct ParserCase {
    input: String,
    status: ParseStatus,
    items: Vec<String>,
}

fn parser_robustness() -> Outcome {
    let cases: Vec<ParserCase> = include_str!("fixtures/malformed_outputs.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    ensure(cases.len() == 100, || format!("{} fixture cases", cases.len()))?;
    let agree = cases
        .iter()
        .filter(|c| {
            let out = extract_list(&c.input);
            out.status == c.status && out.items == c.items
        })
        .count();
    ensure(agree == 100, || format!("{agree}/100 fixture cases agree"))?;

    let taxonomy = TaxonomyMap::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9A85E);
    for n in 0..500 {
        let (names, granularity): (&[&str], _) = if n % 2 == 0 {
            (&VALUE_LEAVES, Granularity::Leaf)
        } else {
            (&VALUE_CATEGORIES, Granularity::Parent)
        };
        let mut subset: Vec<&str> = names.iter().copied().filter(|_| rng.random_bool(0.1)).collect();
        for i in (1..subset.len()).rev() {
            subset.swap(i, rng.random_range(0..=i));
        }
        let text = format_list(&subset);
        let out = extract_list(&text);
        ensure(out.status == ParseStatus::Clean && out.items == subset, || format!("subset {n}: {text}"))?;
        let parsed = parse_response(&text, &taxonomy, granularity);
        let want: BTreeSet<ValueLabel> = subset.iter().map(|l| ValueLabel::from_name(l).unwrap()).collect();
        ensure(parsed.labels == want, || format!("subset {n}: labels differ for {text}"))?;
    }
    Ok("100/100 fixture cases; 500 random subsets round-trip".into())
}

// ---------------------------------------------------------------- harness

struct Criterion {
    number: u32,
    name: &'static str,
    limit: Duration,
    check: fn() -> Option<Outcome>,
}

const CRITERIA: [Criterion; 9] = [
    Criterion {
        number: 1,
        name: "agreement replication",
        limit: Duration::from_secs(5),
        check: || std::env::var_os("SEAT_PUBLIC_ANNOTATIONS").map(|d| agreement_replication(Path::new(&d))),
    },
    Criterion {
        number: 2,
        name: "metric oracles",
        limit: Duration::from_secs(10),
        check: || Some(metric_oracles()),
    },
    Criterion {
        number: 3,
        name: "voting",
        limit: Duration::from_secs(5),
        check: || Some(voting()),
    },
    Criterion {
        number: 4,
        name: "retrieval",
        limit: Duration::from_secs(5),
        check: || Some(retrieval()),
    },
    Criterion {
        number: 5,
        name: "prompt correctness",
        limit: Duration::from_secs(2),
        check: || Some(prompt_correctness()),
    },
    Criterion {
        number: 6,
        name: "end-to-end determinism",
        limit: Duration::from_secs(60),
        check: || Some(end_to_end_determinism()),
    },
    Criterion {
        number: 7,
        name: "directional sanity",
        limit: Duration::from_secs(60),
        check: || Some(directional_sanity()),
    },
    Criterion {
        number: 8,
        name: "parser robustness",
        limit: Duration::from_secs(5),
        check: || Some(parser_robustness()),
    },
    Criterion {
        number: 9,
        name: "plan arithmetic",
        limit: Duration::from_secs(180),
        check: || Some(plan_arithmetic()),
    },
];

fn main() -> ExitCode {
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| only.is_none_or(|n| n == c.number)) {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.check));
        let elapsed = start.elapsed();
        let line = match result {
            Ok(None) => format!("REPLACED by criterion 2 (SEAT_PUBLIC_ANNOTATIONS not set)"),
            Ok(Some(Ok(detail))) if elapsed <= c.limit => format!("PASS ({detail}; {elapsed:.2?})"),
            Ok(Some(Ok(detail))) => {
                failed += 1;
                format!("FAIL ({detail}; {elapsed:.2?} exceeds {:?})", c.limit)
            }
            Ok(Some(Err(reason))) => {
                failed += 1;
                format!("FAIL ({reason}; {elapsed:.2?})")
            }
            Err(payload) => {
                failed += 1;
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("FAIL (panic: {msg}; {elapsed:.2?})")
            }
        };
        println!("criterion {} {}: {line}", c.number, c.name);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
