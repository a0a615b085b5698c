//! Document embeddings and nearest-neighbor training documents.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::Document;

pub const LOCAL_DIM: usize = 256;
const NGRAM: usize = 3;
pub const REMOTE_BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vectors come from different providers ({0} vs {1})")]
    ProviderMismatch(String, String),
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("non-finite value in embedding")]
    NonFinite,
    #[error("{0} document set is empty")]
    EmptySet(&'static str),
    #[error("malformed provider response: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimilarityError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub dim: usize,
    pub provider_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_id: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SimilarityError::NonFinite);
        }
        Ok(Self { dim: values.len(), values, provider_id: provider_id.into() })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * k).collect(), ..self.clone() }
    }
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.provider_id != b.provider_id {
        return Err(SimilarityError::ProviderMismatch(a.provider_id.clone(), b.provider_id.clone()));
    }
    if a.values.len() != b.values.len() {
        return Err(SimilarityError::DimensionMismatch { expected: a.values.len(), found: b.values.len() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// Hashed character-trigram counts (FNV-1a into 256 buckets), L2-normalized.
/// Empty text maps to the uniform unit vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalProvider;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl LocalProvider {
    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0f64; LOCAL_DIM];
        let chars: Vec<char> =
            std::iter::once('\u{2}').chain(text.to_lowercase().chars()).chain(std::iter::once('\u{3}')).collect();
        if text.is_empty() {
            v.fill(1.0 / (LOCAL_DIM as f64).sqrt());
            return EmbeddingVector { values: v, dim: LOCAL_DIM, provider_id: self.id() };
        }
        let mut buf = String::new();
        for w in chars.windows(NGRAM.min(chars.len())) {
            buf.clear();
            buf.extend(w);
            v[(fnv1a(buf.as_bytes()) % LOCAL_DIM as u64) as usize] += 1.0;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        EmbeddingVector { values: v, dim: LOCAL_DIM, provider_id: self.id() }
    }
}

impl EmbeddingProvider for LocalProvider {
    fn id(&self) -> String {
        format!("local-char{NGRAM}gram-{LOCAL_DIM}")
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub provider_id: String,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub provider_id: String,
    pub dim: usize,
}

fn http_client() -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .connect_timeout(Duration::from_secs(15))
        .timeout(Duration::from_secs(120))
        .build()
        .map_err(|e| SimilarityError::ProviderUnavailable(e.to_string()))
}

fn checked_vectors(
    provider_id: &str,
    dim: usize,
    n_texts: usize,
    vectors: Vec<Vec<f64>>,
) -> Result<Vec<EmbeddingVector>> {
    if vectors.len() != n_texts {
        return Err(SimilarityError::Format(format!("{} vectors for {} texts", vectors.len(), n_texts)));
    }
    vectors
        .into_iter()
        .map(|v| {
            if v.len() != dim {
                return Err(SimilarityError::DimensionMismatch { expected: dim, found: v.len() });
            }
            EmbeddingVector::new(v, provider_id)
        })
        .collect()
}

/// Client for the embedding sidecar (`POST /embed`, `GET /health`).
pub struct RemoteProvider {
    base_url: String,
    client: reqwest::blocking::Client,
    provider_id: std::sync::OnceLock<String>,
}

impl RemoteProvider {
    pub fn new(base_url: impl Into<String>) -> Result<Self> {
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client: http_client()?,
            provider_id: Default::default(),
        })
    }

    pub fn health(&self) -> Result<Health> {
        let resp = self
            .client
            .get(format!("{}/health", self.base_url))
            .send()
            .map_err(|e| SimilarityError::ProviderUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(SimilarityError::ProviderUnavailable(format!(
                "health returned HTTP {}",
                resp.status().as_u16()
            )));
        }
        let h: Health = resp.json().map_err(|e| SimilarityError::Format(e.to_string()))?;
        let _ = self.provider_id.set(h.provider_id.clone());
        Ok(h)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let resp = self
            .client
            .post(format!("{}/embed", self.base_url))
            .json(&EmbedRequest { texts: texts.to_vec() })
            .send()
            .map_err(|e| SimilarityError::ProviderUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 503 {
            return Err(SimilarityError::ProviderUnavailable("model loading".into()));
        }
        if !resp.status().is_success() {
            return Err(SimilarityError::Format(format!("embed returned HTTP {status}")));
        }
        let body: EmbedResponse = resp.json().map_err(|e| SimilarityError::Format(e.to_string()))?;
        let _ = self.provider_id.set(body.provider_id.clone());
        checked_vectors(&body.provider_id, body.dim, texts.len(), body.vectors)
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn id(&self) -> String {
        if let Some(id) = self.provider_id.get() {
            return id.clone();
        }
        self.health().map(|h| h.provider_id).unwrap_or_else(|_| format!("remote:{}", self.base_url))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(REMOTE_BATCH) {
            out.extend(self.embed_batch(batch)?);
        }
        Ok(out)
    }
}

/// OpenAI-compatible `/v1/embeddings` endpoint.
pub struct OpenAiEmbeddings {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct OpenAiEmbeddingReply {
    data: Vec<OpenAiEmbeddingItem>,
}

#[derive(Deserialize)]
struct OpenAiEmbeddingItem {
    embedding: Vec<f64>,
    #[serde(default)]
    index: usize,
}

impl OpenAiEmbeddings {
    pub fn new(base_url: &str, model: impl Into<String>, api_key_env: &str) -> Result<Self> {
        Ok(Self {
            url: format!("{}/v1/embeddings", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key: std::env::var(api_key_env).ok().filter(|k| !k.is_empty()),
            client: http_client()?,
        })
    }
}

impl EmbeddingProvider for OpenAiEmbeddings {
    fn id(&self) -> String {
        format!("openai:{}", self.model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(REMOTE_BATCH) {
            let mut rb = self.client.post(&self.url).json(&serde_json::json!({ "model": self.model, "input": batch }));
            if let Some(k) = &self.api_key {
                rb = rb.bearer_auth(k);
            }
            let resp = rb.send().map_err(|e| SimilarityError::ProviderUnavailable(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(SimilarityError::ProviderUnavailable(format!("HTTP {}", resp.status().as_u16())));
            }
            let mut reply: OpenAiEmbeddingReply = resp.json().map_err(|e| SimilarityError::Format(e.to_string()))?;
            reply.data.sort_by_key(|d| d.index);
            let dim = reply.data.first().map_or(0, |d| d.embedding.len());
            out.extend(checked_vectors(
                &self.id(),
                dim,
                batch.len(),
                reply.data.into_iter().map(|d| d.embedding).collect(),
            )?);
        }
        Ok(out)
    }
}

/// Wraps a provider with an on-disk cache, one file per
/// sha256(provider id, text).
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    fn path(&self, provider_id: &str, text: &str) -> PathBuf {
        let mut h = Sha256::new();
        h.update(provider_id.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        self.dir.join(format!("{}.json", hex::encode(h.finalize())))
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let pid = self.inner.id();
        let mut out: Vec<Option<EmbeddingVector>> = texts
            .iter()
            .map(|t| {
                fs::read(self.path(&pid, t))
                    .ok()
                    .and_then(|b| serde_json::from_slice::<EmbeddingVector>(&b).ok())
                    .filter(|v| v.provider_id == pid)
            })
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.embed(&batch)?;
            for (i, v) in missing.into_iter().zip(fresh) {
                let p = self.path(&pid, &texts[i]);
                let tmp = p.with_extension(format!("tmp{}", std::process::id()));
                fs::write(&tmp, serde_json::to_vec(&v).unwrap())?;
                fs::rename(tmp, p)?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }
}

/// One vector per document over its reading-order text, embedded in
/// batches of 32 with at most `concurrency` batches in flight.
pub fn embed_documents(
    docs: &[Document],
    provider: &dyn EmbeddingProvider,
    concurrency: usize,
) -> Result<Vec<EmbeddingVector>> {
    let texts: Vec<String> = docs.iter().map(Document::full_text).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| SimilarityError::ProviderUnavailable(e.to_string()))?;
    let batches: Vec<Result<Vec<EmbeddingVector>>> =
        pool.install(|| texts.par_chunks(32).map(|b| provider.embed(b)).collect());
    let mut out = Vec::with_capacity(docs.len());
    for b in batches {
        out.extend(b?);
    }
    if let Some(first) = out.first() {
        let dim = first.dim;
        if let Some(bad) = out.iter().find(|v| v.dim != dim || v.values.len() != dim) {
            return Err(SimilarityError::DimensionMismatch { expected: dim, found: bad.values.len() });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub train_doc_id: String,
    pub score: f64,
}

/// Test doc id to its nearest training document.
pub type NeighborMap = BTreeMap<String, Neighbor>;

/// Argmax of cosine per test vector; ties go to the smallest train id.
pub fn nearest_from_vectors(
    train: &[(String, EmbeddingVector)],
    test: &[(String, EmbeddingVector)],
) -> Result<NeighborMap> {
    if train.is_empty() {
        return Err(SimilarityError::EmptySet("train"));
    }
    if test.is_empty() {
        return Err(SimilarityError::EmptySet("test"));
    }
    let mut map = NeighborMap::new();
    for (tid, tv) in test {
        let mut best: Option<(f64, &str)> = None;
        for (rid, rv) in train {
            let s = cosine(tv, rv)?;
            let better = match best {
                None => true,
                Some((bs, bid)) => s > bs || (s == bs && rid.as_str() < bid),
            };
            if better {
                best = Some((s, rid));
            }
        }
        let (score, id) = best.unwrap();
        map.insert(tid.clone(), Neighbor { train_doc_id: id.to_string(), score });
    }
    Ok(map)
}

pub fn select_nearest_neighbors(
    train: &[Document],
    test: &[Document],
    provider: &dyn EmbeddingProvider,
    concurrency: usize,
) -> Result<NeighborMap> {
    if train.is_empty() {
        return Err(SimilarityError::EmptySet("train"));
    }
    if test.is_empty() {
        return Err(SimilarityError::EmptySet("test"));
    }
    let tv = embed_documents(train, provider, concurrency)?;
    let sv = embed_documents(test, provider, concurrency)?;
    let train: Vec<(String, EmbeddingVector)> = train.iter().map(|d| d.doc_id.clone()).zip(tv).collect();
    let test: Vec<(String, EmbeddingVector)> = test.iter().map(|d| d.doc_id.clone()).zip(sv).collect();
    nearest_from_vectors(&train, &test)
}

/// Distinct training documents selected by any test document, sorted.
pub fn neighbor_pool(map: &NeighborMap) -> Vec<String> {
    map.values().map(|n| n.train_doc_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}
