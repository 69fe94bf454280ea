use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use seat_core::config::{Config, MockKind, ProviderKind};
use seat_core::corpus::completeness_report;
use seat_core::llm::write_atomic;
use seat_core::metrics::{self, MetricsReport};
use seat_core::orchestrator::{self, ExperimentInputs, ExperimentPlan};
use seat_core::prompting::Method;
use seat_core::report::ReportBundle;
use seat_core::Granularity;

#[derive(Parser)]
#[command(name = "seat", version, about = "Value-prediction experiments from SEAT annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file.
    #[arg(long, short, default_value = "seat.toml")]
    config: PathBuf,
    /// Output directory, overriding `paths.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderChoice {
    CopyNearest,
    NoisyCopy,
    Table,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Leaf,
    Parent,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Leaf => Granularity::Leaf,
            GranularityArg::Parent => Granularity::Parent,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate the input files and write canonical copies under <out>/ingest.
    Ingest(Common),
    /// Check inputs and report annotation coverage without writing anything.
    Validate(Common),
    /// Build or load the embedding index and write <out>/embeddings.jsonl.
    Embed(Common),
    /// Write the experiment plan to <out>/plan.json.
    Plan(Common),
    /// Execute a plan.
    Run {
        #[command(flatten)]
        common: Common,
        /// Plan file written by `seat plan`; by default the plan is built from the config.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, value_enum)]
        provider: Option<ProviderChoice>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Keep completed records from an earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Score predictions and write <out>/metrics.csv.
    Score(Common),
    /// Inter-annotator agreement from the annotation files alone.
    Agree {
        #[command(flatten)]
        common: Common,
        /// Granularity for the values dimension.
        #[arg(long, value_enum, default_value = "leaf")]
        values: GranularityArg,
    },
    /// Results table and figure data from <out>/metrics.csv.
    Report {
        #[command(flatten)]
        common: Common,
        /// Append the metrics row behind every table cell.
        #[arg(long)]
        audit: bool,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    if !common.config.exists() {
        bail!("config file {} not found", common.config.display());
    }
    let mut config = Config::load(&common.config)?;
    if let Some(out) = &common.out {
        config.paths.out = out.clone();
    }
    Ok(config)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_atomic(path, content.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn ingest(common: &Common, write: bool) -> Result<()> {
    let config = load_config(common)?;
    config.taxonomy()?;
    let corpus = config.corpus()?;
    let annotations = config.annotations(&corpus)?;
    let report = completeness_report(&annotations, &corpus);
    println!(
        "{} justifications, {} annotators, {} records, {} missing cells",
        corpus.len(),
        report.annotators.len(),
        annotations.len(),
        report.missing.len()
    );
    for (a, j) in &report.missing {
        println!("missing: {a} {j}");
    }
    if write {
        let dir = config.paths.out.join("ingest");
        write_file(&dir.join("corpus.jsonl"), &corpus.to_jsonl())?;
        write_file(&dir.join("annotations.jsonl"), &annotations.to_jsonl())?;
        let json = serde_json::to_string_pretty(&report)? + "\n";
        write_file(&dir.join("completeness.json"), &json)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn embed(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let corpus = config.corpus()?;
    let index = config.embedding_index(&corpus)?;
    let path = config.paths.out.join("embeddings.jsonl");
    write_file(&path, &index.to_jsonl())?;
    println!("{} vectors of dimension {} from {}", index.len(), index.dim(), index.provenance());
    Ok(())
}

fn plan(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let corpus = config.corpus()?;
    let annotations = config.annotations(&corpus)?;
    let plan = config.plan(&annotations)?;
    let path = config.paths.out.join("plan.json");
    std::fs::create_dir_all(&config.paths.out)?;
    plan.write(&path)?;
    println!(
        "{} experiments ({} settings x {} annotators), {} run records expected; wrote {}",
        plan.experiments(),
        plan.settings.len(),
        plan.annotators.len(),
        plan.expected_records(corpus.len()),
        path.display()
    );
    Ok(())
}

fn run(common: &Common, plan_path: Option<&Path>, provider: Option<ProviderChoice>, seeds: Option<Vec<u64>>, resume: bool) -> Result<()> {
    let mut config = load_config(common)?;
    match provider {
        Some(ProviderChoice::Http) => config.provider.kind = ProviderKind::Http,
        Some(choice) => {
            config.provider.kind = ProviderKind::Mock;
            config.provider.mock = match choice {
                ProviderChoice::CopyNearest => MockKind::CopyNearest,
                ProviderChoice::NoisyCopy => MockKind::NoisyCopy,
                _ => MockKind::Table,
            };
        }
        None => {}
    }
    let taxonomy = config.taxonomy()?;
    let corpus = config.corpus()?;
    let annotations = config.annotations(&corpus)?;
    let mut plan = match plan_path {
        Some(p) => ExperimentPlan::load(p)?,
        None => config.plan(&annotations)?,
    };
    if let Some(seeds) = seeds {
        plan.seeds = seeds;
    }
    if common.out.is_some() || plan_path.is_none() {
        plan.output_dir = config.paths.out.clone();
    }
    plan.provider = config.provider_label();
    if plan.corpus_ref != annotations.corpus_ref() {
        bail!("plan was made for corpus {} but the configured corpus is {}", plan.corpus_ref, annotations.corpus_ref());
    }
    let index = if plan.settings.iter().any(|s| s.method == Method::FewShot) {
        Some(config.embedding_index(&corpus)?)
    } else {
        None
    };
    let client = config.client()?;
    let inputs = ExperimentInputs {
        corpus: &corpus,
        annotations: &annotations,
        taxonomy: &taxonomy,
        index: index.as_ref(),
    };
    let output = orchestrator::run_plan(&plan, &inputs, &client, resume)?;
    let s = &output.summary;
    println!(
        "{} records ({} attempted, {} reused, {} failed), {} predictions; {} provider calls, {} cache hits",
        s.records, s.attempted, s.reused, s.failed, s.predictions, s.client.provider_calls, s.client.cache_hits
    );
    if s.failed > 0 {
        bail!("{} cells failed; rerun with --resume to retry them", s.failed);
    }
    Ok(())
}

fn scoring_granularity(config: &Config) -> Result<Granularity> {
    let plan_path = config.paths.out.join("plan.json");
    if plan_path.exists() {
        Ok(ExperimentPlan::load(&plan_path)?.scoring)
    } else {
        Ok(config.plan.granularity)
    }
}

fn score(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let taxonomy = config.taxonomy()?;
    let corpus = config.corpus()?;
    let annotations = config.annotations(&corpus)?;
    let out = &config.paths.out;
    let predictions = orchestrator::load_predictions(out)?;
    let runs = orchestrator::load_run_records(out)?;
    if predictions.is_empty() {
        bail!("no predictions under {}; run `seat run` first", out.join("predictions").display());
    }
    let report = metrics::score_predictions(&predictions, &runs, &annotations, &taxonomy, scoring_granularity(&config)?)?;
    write_file(&out.join("metrics.csv"), &report.to_csv())?;
    write_file(&out.join("metrics.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    for note in &report.diagnostics {
        log::info!("{note}");
    }
    println!("{} rows; wrote {}", report.rows.len(), out.join("metrics.csv").display());
    Ok(())
}

fn agree(common: &Common, values: Granularity) -> Result<()> {
    let config = load_config(common)?;
    let taxonomy = config.taxonomy()?;
    let corpus = config.corpus()?;
    let annotations = config.annotations(&corpus)?;
    let report = metrics::agreement(&annotations, &corpus, &taxonomy, values)?;
    let table = report.to_table();
    print!("{table}");
    if report.incomplete_items > 0 {
        println!("{} justifications left out: not annotated by everyone", report.incomplete_items);
    }
    let out = &config.paths.out;
    write_file(&out.join("agreement.txt"), &table)?;
    write_file(&out.join("agreement.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(())
}

fn report(common: &Common, audit: bool) -> Result<()> {
    let config = load_config(common)?;
    let out = &config.paths.out;
    let json_path = out.join("metrics.json");
    let csv_path = out.join("metrics.csv");
    let metrics: MetricsReport = if json_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&json_path)?).with_context(|| format!("reading {}", json_path.display()))?
    } else {
        let text = std::fs::read_to_string(&csv_path).with_context(|| format!("reading {}; run `seat score` first", csv_path.display()))?;
        MetricsReport::from_csv(&text, scoring_granularity(&config)?)?
    };
    let agreement_path = out.join("agreement.json");
    let agreement = if agreement_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(&agreement_path)?)?)
    } else {
        None
    };
    let bundle = ReportBundle::build(&metrics, agreement.as_ref(), audit);
    let dir = out.join("report");
    bundle.write(&dir).with_context(|| format!("writing {}", dir.display()))?;
    let mut stdout = std::io::stdout().lock();
    let _ = write!(stdout, "{}", bundle.files["results.txt"])
        .and_then(|()| writeln!(stdout, "wrote {} files to {}", bundle.files.len(), dir.display()));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(c) => ingest(&c, true),
        Command::Validate(c) => ingest(&c, false),
        Command::Embed(c) => embed(&c),
        Command::Plan(c) => plan(&c),
        Command::Run {
            common,
            plan,
            provider,
            seeds,
            resume,
        } => run(&common, plan.as_deref(), provider, seeds, resume),
        Command::Score(c) => score(&c),
        Command::Agree { common, values } => agree(&common, values.into()),
        Command::Report { common, audit } => report(&common, audit),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
