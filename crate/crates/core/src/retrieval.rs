//! Sentence embeddings for justifications and K-nearest-neighbour
//! demonstration selection.
//!
//! Similarity is cosine; ties are broken by ascending justification id so
//! neighbour lists are a total order. Only raw justification text is ever
//! embedded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::llm::{transport_error, write_atomic, CallError, RetryPolicy};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("embedding for {0:?} has a non-finite entry")]
    NonFinite(String),
    #[error("no embedding for {0:?}")]
    UnknownId(String),
    #[error("K = {k} needs more than {k} candidates, only {available} available")]
    KTooLarge { k: usize, available: usize },
    #[error("K must be positive")]
    ZeroK,
    #[error("embeddings missing for {} justification(s): {}", .0.len(), .0.join(", "))]
    Missing(Vec<String>),
    #[error("embedding provider failed for {}: {source}", ids.join(", "))]
    Provider { ids: Vec<String>, source: CallError },
    #[error("provider returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    provenance: String,
}

impl EmbeddingIndex {
    /// Validates dimension uniformity and finiteness.
    pub fn new(
        vectors: BTreeMap<String, Vec<f64>>,
        provenance: impl Into<String>,
    ) -> Result<Self, RetrievalError> {
        let dim = vectors.values().next().map_or(0, Vec::len);
        for (id, v) in &vectors {
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch(dim, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(RetrievalError::NonFinite(id.clone()));
            }
        }
        Ok(Self {
            dim,
            vectors,
            provenance: provenance.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    /// Error naming every corpus id without a vector.
    pub fn check_covers(&self, corpus: &Corpus) -> Result<(), RetrievalError> {
        let missing: Vec<String> = corpus
            .ids()
            .filter(|id| !self.vectors.contains_key(*id))
            .map(str::to_string)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(RetrievalError::Missing(missing))
        }
    }

    /// Line-delimited `{justification_id, vector}` records sorted by id.
    pub fn to_jsonl(&self) -> String {
        let rows: Vec<VectorRecord> = self
            .vectors
            .iter()
            .map(|(id, v)| VectorRecord {
                justification_id: id.clone(),
                vector: v.clone(),
            })
            .collect();
        crate::corpus::to_jsonl(&rows)
    }

    /// Loads a precomputed vectors file, restricted to the corpus ids, and
    /// fails naming any corpus id the file does not cover.
    pub fn load_precomputed(path: &Path, corpus: &Corpus) -> Result<Self, RetrievalError> {
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut vectors = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: VectorRecord = serde_json::from_str(line).map_err(|e| RetrievalError::File {
                path: path.display().to_string(),
                message: format!("line {}: {e}", i + 1),
            })?;
            if corpus.get(&rec.justification_id).is_some() {
                vectors.insert(rec.justification_id, rec.vector);
            }
        }
        let index = Self::new(vectors, format!("precomputed file {}", path.display()))?;
        index.check_covers(corpus)?;
        Ok(index)
    }
}

#[derive(Serialize, Deserialize)]
struct VectorRecord {
    justification_id: String,
    vector: Vec<f64>,
}

pub trait EmbeddingProvider: Send + Sync {
    /// Identifier that, with the text, determines the vector.
    fn id(&self) -> String;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, CallError>;
}

/// Offline embedder: SHA-256 of the text seeds a Gaussian draw, normalized
/// to unit length. Identical text gives identical vectors.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 384 }
    }
}

impl HashEmbedder {
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-embedder-v1:{}", self.dim)
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, CallError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// `POST {model, input: [texts]}`, reading `data[i].embedding`.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        token: Option<String>,
        timeout: Duration,
    ) -> Result<Self, CallError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| CallError::Fatal {
                status: None,
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token,
            client,
        })
    }
}

#[derive(Serialize)]
struct EmbedWireRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedWireResponse {
    data: Vec<EmbedWireItem>,
}

#[derive(Deserialize)]
struct EmbedWireItem {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}#{}", self.endpoint, self.model)
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, CallError> {
        let mut builder = self.client.post(&self.endpoint).json(&EmbedWireRequest {
            model: &self.model,
            input: texts,
        });
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(transport_error)?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(CallError::from_status(status.as_u16(), body));
        }
        let wire: EmbedWireResponse = response.json().map_err(|e| CallError::Fatal {
            status: Some(status.as_u16()),
            message: format!("unreadable embeddings body: {e}"),
        })?;
        let mut items = wire.data;
        if items.iter().all(|i| i.index.is_some()) {
            items.sort_by_key(|i| i.index);
        }
        Ok(items.into_iter().map(|i| i.embedding).collect())
    }
}

#[derive(Clone, Debug)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub retry: RetryPolicy,
    /// Directory for cached indexes keyed by corpus digest and provider id.
    pub cache_dir: Option<PathBuf>,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            retry: RetryPolicy::default(),
            cache_dir: None,
        }
    }
}

fn index_cache_path(dir: &Path, corpus: &Corpus, provider_id: &str) -> PathBuf {
    let mut hasher = Sha256::new();
    hasher.update(corpus.digest().as_bytes());
    hasher.update([0u8]);
    hasher.update(provider_id.as_bytes());
    dir.join(format!("embeddings-{}.jsonl", hex::encode(hasher.finalize())))
}

/// One vector per justification. A cached index for the same corpus and
/// provider is reused without calling the provider.
pub fn embed_corpus(
    provider: &dyn EmbeddingProvider,
    corpus: &Corpus,
    options: &EmbedOptions,
) -> Result<EmbeddingIndex, RetrievalError> {
    let provider_id = provider.id();
    let cache_path = options
        .cache_dir
        .as_deref()
        .map(|d| index_cache_path(d, corpus, &provider_id));
    if let Some(path) = cache_path.as_deref().filter(|p| p.exists()) {
        let mut index = EmbeddingIndex::load_precomputed(path, corpus)?;
        index.provenance = provider_id;
        return Ok(index);
    }

    let items: Vec<(&str, &str)> = corpus.iter().map(|j| (j.id.as_str(), j.text.as_str())).collect();
    let mut vectors = BTreeMap::new();
    for (n, batch) in items.chunks(options.batch_size.max(1)).enumerate() {
        let texts: Vec<&str> = batch.iter().map(|(_, t)| *t).collect();
        let result = options.retry.run(|| provider.embed(&texts));
        let embedded = match result {
            Ok((v, _)) => v,
            Err((source, _)) => {
                let ids = items[n * options.batch_size.max(1)..]
                    .iter()
                    .map(|(id, _)| id.to_string())
                    .collect();
                return Err(RetrievalError::Provider { ids, source });
            }
        };
        if embedded.len() != batch.len() {
            return Err(RetrievalError::CountMismatch {
                expected: batch.len(),
                got: embedded.len(),
            });
        }
        for ((id, _), v) in batch.iter().zip(embedded) {
            vectors.insert(id.to_string(), v);
        }
    }
    let index = EmbeddingIndex::new(vectors, provider_id)?;
    if let Some(path) = cache_path {
        write_atomic(&path, index.to_jsonl().as_bytes()).map_err(|e| RetrievalError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    Ok(index)
}

/// `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub justification_id: String,
    pub score: f64,
}

pub type NeighborList = Vec<Neighbor>;

/// The `k` most similar items to `query_id`, excluding the query itself.
pub fn knn(index: &EmbeddingIndex, query_id: &str, k: usize) -> Result<NeighborList, RetrievalError> {
    knn_filtered(index, query_id, k, |_| true)
}

/// [`knn`] over the candidates accepted by `keep`.
pub fn knn_filtered(
    index: &EmbeddingIndex,
    query_id: &str,
    k: usize,
    keep: impl Fn(&str) -> bool,
) -> Result<NeighborList, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let query = index
        .get(query_id)
        .ok_or_else(|| RetrievalError::UnknownId(query_id.to_string()))?;
    let mut scored = Vec::with_capacity(index.len());
    for (id, v) in &index.vectors {
        if id == query_id || !keep(id) {
            continue;
        }
        scored.push(Neighbor {
            justification_id: id.clone(),
            score: cosine(query, v)?,
        });
    }
    if k > scored.len() {
        return Err(RetrievalError::KTooLarge {
            k,
            available: scored.len(),
        });
    }
    // `vectors` iterates in id order, so a stable sort keeps ascending ids on ties.
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    scored.truncate(k);
    Ok(scored)
}
