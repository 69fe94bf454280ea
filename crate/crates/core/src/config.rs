//! TOML run configuration.
//!
//! ```toml
//! [provider]
//! kind = "mock"            # mock | http
//! mock = "noisy-copy"      # copy-nearest | noisy-copy | table
//! model = "meta-llama/Meta-Llama-3.1-8B-Instruct"
//!
//! [plan]
//! seeds = [1, 2, 3, 4, 5]
//! vote_threshold = 3
//!
//! [retrieval]
//! backend = "hash"         # hash | http | file
//!
//! [paths]
//! corpus = "corpus.jsonl"
//! annotations = "annotations.jsonl"
//! out = "out"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! The API token is read from `SEAT_API_TOKEN`, never from the file.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{load_profiles, AnnotationSet, Corpus};
use crate::llm::{HttpChatProvider, LlmClient, MockProvider, MockSpec, ResponseCache, RetryPolicy};
use crate::orchestrator::{ExperimentPlan, ModelSettings};
use crate::prompting::{enumerate_settings, ExperimentSetting};
use crate::retrieval::{embed_corpus, EmbedOptions, EmbeddingIndex, HashEmbedder, HttpEmbedder};
use crate::taxonomy::{Granularity, TaxonomyMap};
use crate::Error;

pub const TOKEN_ENV: &str = "SEAT_API_TOKEN";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockKind {
    CopyNearest,
    #[default]
    NoisyCopy,
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub system_role: bool,
    pub mock: MockKind,
    pub mock_table: Option<PathBuf>,
    pub drop_rate: f64,
    pub add_rate: f64,
    pub mock_seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        let model = ModelSettings::default();
        let MockSpec::NoisyCopy {
            drop_rate,
            add_rate,
            seed,
        } = MockSpec::noisy_default()
        else {
            unreachable!()
        };
        Self {
            kind: ProviderKind::Mock,
            endpoint: None,
            model: model.model,
            temperature: model.temperature,
            max_tokens: model.max_tokens,
            timeout_secs: 60,
            max_retries: RetryPolicy::default().max_retries,
            system_role: false,
            mock: MockKind::NoisyCopy,
            mock_table: None,
            drop_rate,
            add_rate,
            mock_seed: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub seeds: Vec<u64>,
    pub vote_threshold: usize,
    pub concurrency: usize,
    pub granularity: Granularity,
    /// Setting ids to run; empty means all 21.
    pub settings: Vec<String>,
    /// Annotator ids to run; empty means all.
    pub annotators: Vec<String>,
    pub skip_unlabeled_demos: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            seeds: crate::orchestrator::DEFAULT_SEEDS.to_vec(),
            vote_threshold: crate::orchestrator::DEFAULT_VOTE_THRESHOLD,
            concurrency: 4,
            granularity: Granularity::Parent,
            settings: Vec::new(),
            annotators: Vec::new(),
            skip_unlabeled_demos: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalBackend {
    #[default]
    Hash,
    Http,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub backend: RetrievalBackend,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Precomputed `{justification_id, vector}` lines for the file backend.
    pub path: Option<PathBuf>,
    pub batch_size: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            backend: RetrievalBackend::Hash,
            dim: 384,
            endpoint: None,
            model: None,
            path: None,
            batch_size: EmbedOptions::default().batch_size,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaxonomyConfig {
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub annotations: PathBuf,
    #[serde(default)]
    pub annotators: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Response and embedding cache; defaults to `<out>/cache`.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub taxonomy: TaxonomyConfig,
    pub paths: PathsConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, Error> {
        let mut config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let p = &mut config.paths;
        resolve(base, &mut p.corpus);
        resolve(base, &mut p.annotations);
        resolve(base, &mut p.out);
        for opt in [&mut p.annotators, &mut p.cache, &mut config.taxonomy.path, &mut config.retrieval.path, &mut config.provider.mock_table] {
            if let Some(path) = opt {
                resolve(base, path);
            }
        }
        Ok(config)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.cache.clone().unwrap_or_else(|| self.paths.out.join("cache"))
    }

    pub fn taxonomy(&self) -> Result<TaxonomyMap, Error> {
        match &self.taxonomy.path {
            Some(p) => Ok(TaxonomyMap::load(p)?),
            None => Ok(TaxonomyMap::builtin()),
        }
    }

    pub fn corpus(&self) -> Result<Corpus, Error> {
        Ok(Corpus::load(&self.paths.corpus)?)
    }

    pub fn annotations(&self, corpus: &Corpus) -> Result<AnnotationSet, Error> {
        let profiles = match &self.paths.annotators {
            Some(p) => Some(load_profiles(p)?),
            None => None,
        };
        Ok(AnnotationSet::load(&self.paths.annotations, corpus, profiles)?)
    }

    pub fn mock_spec(&self) -> Result<MockSpec, Error> {
        let p = &self.provider;
        Ok(match p.mock {
            MockKind::CopyNearest => MockSpec::CopyNearest,
            MockKind::NoisyCopy => MockSpec::NoisyCopy {
                drop_rate: p.drop_rate,
                add_rate: p.add_rate,
                seed: p.mock_seed,
            },
            MockKind::Table => {
                let path = p
                    .mock_table
                    .as_ref()
                    .ok_or_else(|| Error::Config("provider.mock = \"table\" needs provider.mock_table".into()))?;
                MockSpec::load_table(path)?
            }
        })
    }

    /// Model client with the response cache under [`Config::cache_dir`].
    pub fn client(&self) -> Result<LlmClient, Error> {
        let p = &self.provider;
        let client = match p.kind {
            ProviderKind::Mock => LlmClient::new(MockProvider::new(self.mock_spec()?)),
            ProviderKind::Http => {
                let endpoint = p
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("provider.endpoint is required for kind = \"http\"".into()))?;
                let token = std::env::var(TOKEN_ENV).ok();
                let provider = HttpChatProvider::new(endpoint, token, Duration::from_secs(p.timeout_secs))
                    .map_err(|e| Error::Config(e.to_string()))?;
                LlmClient::new(provider)
            }
        };
        let retry = RetryPolicy {
            max_retries: p.max_retries,
            ..RetryPolicy::default()
        };
        Ok(client
            .with_cache(ResponseCache::open(self.cache_dir().join("responses"))?)
            .with_retry(retry))
    }

    pub fn embedding_index(&self, corpus: &Corpus) -> Result<EmbeddingIndex, Error> {
        let r = &self.retrieval;
        let options = EmbedOptions {
            batch_size: r.batch_size,
            retry: RetryPolicy::default(),
            cache_dir: Some(self.cache_dir().join("embeddings")),
        };
        let index = match r.backend {
            RetrievalBackend::Hash => embed_corpus(&HashEmbedder { dim: r.dim }, corpus, &options)?,
            RetrievalBackend::Http => {
                let endpoint = r
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("retrieval.endpoint is required for backend = \"http\"".into()))?;
                let model = r.model.clone().unwrap_or_default();
                let embedder = HttpEmbedder::new(endpoint, model, std::env::var(TOKEN_ENV).ok(), Duration::from_secs(self.provider.timeout_secs))
                    .map_err(|e| Error::Config(e.to_string()))?;
                embed_corpus(&embedder, corpus, &options)?
            }
            RetrievalBackend::File => {
                let path = r
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("retrieval.path is required for backend = \"file\"".into()))?;
                EmbeddingIndex::load_precomputed(path, corpus)?
            }
        };
        Ok(index)
    }

    pub fn provider_label(&self) -> String {
        match self.provider.kind {
            ProviderKind::Mock => format!("mock:{}", serde_json::to_value(self.provider.mock).expect("enum").as_str().unwrap_or("")),
            ProviderKind::Http => format!("http:{}", self.provider.endpoint.as_deref().unwrap_or("")),
        }
    }

    /// Experiment plan for `annotations` as configured.
    pub fn plan(&self, annotations: &AnnotationSet) -> Result<ExperimentPlan, Error> {
        let c = &self.plan;
        let settings: Vec<ExperimentSetting> = if c.settings.is_empty() {
            enumerate_settings(c.granularity)
        } else {
            c.settings
                .iter()
                .map(|s| s.parse().map_err(|e| Error::Config(format!("plan.settings: {e}"))))
                .collect::<Result<_, _>>()?
        };
        let annotators = if c.annotators.is_empty() {
            annotations.annotator_ids().map(str::to_string).collect()
        } else {
            c.annotators.clone()
        };
        let plan = ExperimentPlan {
            corpus_ref: annotations.corpus_ref().to_string(),
            settings,
            annotators,
            seeds: c.seeds.clone(),
            vote_threshold: c.vote_threshold,
            scoring: c.granularity,
            model: ModelSettings {
                model: self.provider.model.clone(),
                temperature: self.provider.temperature,
                max_tokens: self.provider.max_tokens,
                system_role: self.provider.system_role,
            },
            provider: self.provider_label(),
            concurrency: c.concurrency,
            skip_unlabeled_demos: c.skip_unlabeled_demos,
            output_dir: self.paths.out.clone(),
        };
        plan.validate()?;
        Ok(plan)
    }
}
