//! Sentence embeddings and the cosine kernel.
//!
//! Three providers sit behind [`Embedder`]: a remote HTTP service, a
//! replay-only reader over a previously written cache file, and a
//! character-trigram hashing embedder that needs neither a model nor the
//! network. Any provider can be wrapped in [`CachedEmbedder`] so repeated
//! runs reuse vectors from disk.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::http::{self, RetryPolicy};

pub const EMBED_KEY_ENV: &str = "REVERSENER_EMBED_KEY";

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding contains a non-finite component")]
    NonFinite,
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("cannot embed an empty text")]
    EmptyText,
    #[error("empty input batch")]
    EmptyBatch,
    #[error("embedding request for batch {batch} failed: {message}")]
    Remote { batch: usize, message: String },
    #[error("no cached embedding for {hash} ({preview:?})")]
    CacheMiss { hash: String, preview: String },
    #[error("embedding cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("invalid embedding provider config: {0}")]
    Config(String),
}

/// A fixed-length vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self, EmbedError> {
        Self::new(self.0.iter().map(|v| v * alpha).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbedError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `(a·b) / (‖a‖‖b‖)`, clamped to `[-1, 1]`. Zero-norm inputs are an error.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::Dimension {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// Checks a set of vectors is usable by the cosine kernel: common dimension
/// and nonzero norms.
pub fn check_vectors(vectors: &[EmbeddingVector], dim: Option<usize>) -> Result<(), EmbedError> {
    let expected = dim.or_else(|| vectors.first().map(EmbeddingVector::dim));
    for v in vectors {
        if let Some(expected) = expected {
            if v.dim() != expected {
                return Err(EmbedError::Dimension {
                    expected,
                    got: v.dim(),
                });
            }
        }
        if v.norm() == 0.0 {
            return Err(EmbedError::ZeroNorm);
        }
    }
    Ok(())
}

pub trait Embedder: Send + Sync {
    /// Stable identity of the model behind the vectors; cache keys and
    /// library metadata use it.
    fn provider_id(&self) -> String;

    fn dimension(&self) -> usize;

    /// One vector per text, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed_batch(&[text.to_string()])?.remove(0))
    }
}

fn check_inputs(texts: &[String]) -> Result<(), EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::EmptyBatch);
    }
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(EmbedError::EmptyText);
    }
    Ok(())
}

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    RemoteHttp,
    ReplayFile,
    HashingFallback,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote-http" | "remote" => Ok(Self::RemoteHttp),
            "replay-file" | "replay" => Ok(Self::ReplayFile),
            "hashing-fallback" | "hashing" => Ok(Self::HashingFallback),
            other => Err(format!("unknown embedding provider {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub dimension: usize,
    /// Disk cache; required for `replay-file`, optional otherwise.
    pub cache_path: Option<PathBuf>,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retry_limit: u32,
    pub timeout_s: f64,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::HashingFallback,
            endpoint: None,
            model_name: None,
            dimension: 256,
            cache_path: None,
            batch_size: 32,
            max_in_flight: 4,
            retry_limit: 3,
            timeout_s: 60.0,
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn hashing(dimension: usize) -> Self {
        Self {
            dimension,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension == 0 {
            return Err(EmbedError::Config("dimension must be positive".into()));
        }
        match self.kind {
            ProviderKind::RemoteHttp if self.endpoint.is_none() => {
                Err(EmbedError::Config("remote-http requires an endpoint".into()))
            }
            ProviderKind::ReplayFile if self.cache_path.is_none() => {
                Err(EmbedError::Config("replay-file requires a cache path".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Builds the provider described by `cfg`, wrapped in a disk cache when
/// `cache_path` is set.
pub fn from_config(cfg: &EmbeddingProviderConfig) -> Result<Box<dyn Embedder>, EmbedError> {
    cfg.validate()?;
    let inner: Box<dyn Embedder> = match cfg.kind {
        ProviderKind::HashingFallback => Box::new(HashingEmbedder::new(cfg.dimension)),
        ProviderKind::RemoteHttp => Box::new(HttpEmbedder::new(cfg)?),
        ProviderKind::ReplayFile => {
            let path = cfg.cache_path.as_deref().expect("validated");
            return Ok(Box::new(ReplayEmbedder::open(
                path,
                cfg.model_name.clone(),
                cfg.dimension,
            )?));
        }
    };
    match &cfg.cache_path {
        Some(path) => Ok(Box::new(CachedEmbedder::new(inner, path)?)),
        None => Ok(inner),
    }
}

/// Character-trigram feature hashing into `dimension` buckets, L2-normalised.
///
/// Text is lower-cased and padded with one space on each side, so every
/// non-empty input yields at least one trigram and a nonzero vector.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension }
    }

    fn embed_text(&self, text: &str) -> EmbeddingVector {
        let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
        let mut v = vec![0.0; self.dimension];
        let mut buf = String::new();
        for w in padded.windows(3) {
            buf.clear();
            buf.extend(w);
            let bucket = (fnv1a(buf.as_bytes()) % self.dimension as u64) as usize;
            v[bucket] += 1.0;
        }
        let norm = dot(&v, &v).sqrt();
        for x in &mut v {
            *x /= norm;
        }
        EmbeddingVector(v)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Embedder for HashingEmbedder {
    fn provider_id(&self) -> String {
        format!("hashing-fallback/d{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_inputs(texts)?;
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Client for a `{"model", "input"}` → `{"data": [{"embedding"}]}` service.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    dimension: usize,
    batch_size: usize,
    max_in_flight: usize,
    policy: RetryPolicy,
    client: reqwest::blocking::Client,
    key: Option<String>,
}

impl HttpEmbedder {
    pub fn new(cfg: &EmbeddingProviderConfig) -> Result<Self, EmbedError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| EmbedError::Config("remote-http requires an endpoint".into()))?;
        Ok(Self {
            endpoint,
            model: cfg.model_name.clone().unwrap_or_default(),
            dimension: cfg.dimension,
            batch_size: cfg.batch_size.max(1),
            max_in_flight: cfg.max_in_flight.max(1),
            policy: RetryPolicy {
                retry_limit: cfg.retry_limit,
                ..RetryPolicy::default()
            },
            client: http::client(cfg.timeout_s).map_err(EmbedError::Config)?,
            key: std::env::var(EMBED_KEY_ENV).ok(),
        })
    }

    pub fn with_retry_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    fn request(&self, batch: usize, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let body = json!({ "model": self.model, "input": texts });
        let remote = |message: String| EmbedError::Remote { batch, message };
        let reply = http::post_json(
            &self.client,
            &self.endpoint,
            self.key.as_deref(),
            &body,
            &self.policy,
        )
        .map_err(remote)?;
        let data = reply
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| remote("response has no data array".into()))?;
        if data.len() != texts.len() {
            return Err(remote(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|item| {
                let values: Vec<f64> = item
                    .get("embedding")
                    .cloned()
                    .and_then(|e| serde_json::from_value(e).ok())
                    .ok_or_else(|| remote("item has no numeric embedding".into()))?;
                if values.len() != self.dimension {
                    return Err(EmbedError::Dimension {
                        expected: self.dimension,
                        got: values.len(),
                    });
                }
                let v = EmbeddingVector::new(values)?;
                if v.norm() == 0.0 {
                    return Err(EmbedError::ZeroNorm);
                }
                Ok(v)
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn provider_id(&self) -> String {
        format!("remote-http/{}", self.model)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_inputs(texts)?;
        let chunks: Vec<&[String]> = texts.chunks(self.batch_size).collect();
        let results: Vec<Mutex<Option<Result<Vec<EmbeddingVector>, EmbedError>>>> =
            chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        thread::scope(|s| {
            for _ in 0..self.max_in_flight.min(chunks.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= chunks.len() {
                        break;
                    }
                    let r = self.request(i, chunks[i]);
                    *results[i].lock().unwrap() = Some(r);
                });
            }
        });
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r.into_inner().unwrap().expect("every chunk ran")?);
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    content_hash: String,
    provider_id: String,
    vector: EmbeddingVector,
}

/// On-disk JSONL vector cache keyed by `(provider id, content hash)`.
/// Concurrent readers, one writer at a time.
pub struct EmbeddingCache {
    path: PathBuf,
    entries: RwLock<HashMap<(String, String), EmbeddingVector>>,
    writer: Mutex<()>,
}

impl EmbeddingCache {
    /// Opens (or starts) the cache at `path`. A missing file is an empty cache.
    pub fn open(path: &Path) -> Result<Self, EmbedError> {
        let cache_err = |message: String| EmbedError::Cache {
            path: path.to_path_buf(),
            message,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let raw = fs::read_to_string(path).map_err(|e| cache_err(e.to_string()))?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(line)
                    .map_err(|e| cache_err(format!("line {}: {e}", i + 1)))?;
                entries.insert((rec.provider_id, rec.content_hash), rec.vector);
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        })
    }

    pub fn get(&self, provider_id: &str, hash: &str) -> Option<EmbeddingVector> {
        self.entries
            .read()
            .unwrap()
            .get(&(provider_id.to_string(), hash.to_string()))
            .cloned()
    }

    /// First vector stored under `hash` for any provider.
    pub fn get_any(&self, hash: &str) -> Option<EmbeddingVector> {
        let entries = self.entries.read().unwrap();
        let mut hits: Vec<(&String, &EmbeddingVector)> = entries
            .iter()
            .filter(|((_, h), _)| h == hash)
            .map(|((p, _), v)| (p, v))
            .collect();
        hits.sort_by(|a, b| a.0.cmp(b.0));
        hits.first().map(|(_, v)| (*v).clone())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert_all(
        &self,
        provider_id: &str,
        items: &[(String, EmbeddingVector)],
    ) -> Result<(), EmbedError> {
        let _guard = self.writer.lock().unwrap();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| EmbedError::Cache {
                path: self.path.clone(),
                message: e.to_string(),
            })?;
        let mut buf = String::new();
        for (hash, vector) in items {
            let rec = CacheRecord {
                content_hash: hash.clone(),
                provider_id: provider_id.to_string(),
                vector: vector.clone(),
            };
            buf.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            buf.push('\n');
        }
        file.write_all(buf.as_bytes())
            .map_err(|e| EmbedError::Cache {
                path: self.path.clone(),
                message: e.to_string(),
            })?;
        let mut entries = self.entries.write().unwrap();
        for (hash, vector) in items {
            entries.insert((provider_id.to_string(), hash.clone()), vector.clone());
        }
        Ok(())
    }
}

/// Serves cached vectors and forwards misses to the wrapped provider.
pub struct CachedEmbedder {
    inner: Box<dyn Embedder>,
    cache: EmbeddingCache,
}

impl CachedEmbedder {
    pub fn new(inner: Box<dyn Embedder>, path: &Path) -> Result<Self, EmbedError> {
        Ok(Self {
            inner,
            cache: EmbeddingCache::open(path)?,
        })
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }
}

impl Embedder for CachedEmbedder {
    fn provider_id(&self) -> String {
        self.inner.provider_id()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_inputs(texts)?;
        let pid = self.inner.provider_id();
        let hashes: Vec<String> = texts.iter().map(|t| content_hash(t)).collect();
        let mut missing: Vec<(String, String)> = Vec::new();
        for (t, h) in texts.iter().zip(&hashes) {
            if self.cache.get(&pid, h).is_none() && !missing.iter().any(|(mh, _)| mh == h) {
                missing.push((h.clone(), t.clone()));
            }
        }
        if !missing.is_empty() {
            let fresh_texts: Vec<String> = missing.iter().map(|(_, t)| t.clone()).collect();
            let fresh = self.inner.embed_batch(&fresh_texts)?;
            let items: Vec<(String, EmbeddingVector)> = missing
                .into_iter()
                .map(|(h, _)| h)
                .zip(fresh)
                .collect();
            self.cache.insert_all(&pid, &items)?;
        }
        hashes
            .iter()
            .map(|h| {
                let v = self.cache.get(&pid, h).expect("just inserted");
                if v.dim() != self.dimension() {
                    return Err(EmbedError::Dimension {
                        expected: self.dimension(),
                        got: v.dim(),
                    });
                }
                Ok(v)
            })
            .collect()
    }
}

/// Answers only from a cache file; a miss is an error.
pub struct ReplayEmbedder {
    cache: EmbeddingCache,
    source: Option<String>,
    dimension: usize,
}

impl ReplayEmbedder {
    /// `source` restricts lookups to records written by that provider id.
    pub fn open(path: &Path, source: Option<String>, dimension: usize) -> Result<Self, EmbedError> {
        if !path.exists() {
            return Err(EmbedError::Cache {
                path: path.to_path_buf(),
                message: "replay cache does not exist".into(),
            });
        }
        Ok(Self {
            cache: EmbeddingCache::open(path)?,
            source,
            dimension,
        })
    }
}

impl Embedder for ReplayEmbedder {
    fn provider_id(&self) -> String {
        self.source.clone().unwrap_or_else(|| "replay-file".into())
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_inputs(texts)?;
        texts
            .iter()
            .map(|t| {
                let h = content_hash(t);
                let hit = match &self.source {
                    Some(pid) => self.cache.get(pid, &h),
                    None => self.cache.get_any(&h),
                };
                let v = hit.ok_or_else(|| EmbedError::CacheMiss {
                    hash: h.clone(),
                    preview: http::truncate(t, 80),
                })?;
                if v.dim() != self.dimension {
                    return Err(EmbedError::Dimension {
                        expected: self.dimension,
                        got: v.dim(),
                    });
                }
                Ok(v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_server;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[1.0, 2.0, 3.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let got = cosine_similarity(&a, &v(&[4.0, 5.0, 6.0])).unwrap();
        assert!((got - 0.974631846).abs() < 1e-6, "{got}");
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(EmbedError::ZeroNorm)
        ));
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(EmbedError::Dimension { .. })
        ));
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn hashing_is_deterministic_and_shaped() {
        let e = HashingEmbedder::new(64);
        let a1 = e.embed_batch(&["a".into()]).unwrap();
        let a2 = e.embed_batch(&["a".into()]).unwrap();
        assert_eq!(a1, a2);
        let ab = e.embed_batch(&["a".into(), "b".into()]).unwrap();
        assert_eq!(ab.len(), 2);
        assert!(ab.iter().all(|x| x.dim() == 64));
        assert!((ab[0].norm() - 1.0).abs() < 1e-12);
        assert!(matches!(e.embed_batch(&[]), Err(EmbedError::EmptyBatch)));
        assert!(matches!(e.embed_batch(&[" ".into()]), Err(EmbedError::EmptyText)));
    }

    #[test]
    fn replay_reproduces_cached_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let texts: Vec<String> = vec!["John runs.".into(), "Paris is big.".into(), "John runs.".into()];
        let first = CachedEmbedder::new(Box::new(HashingEmbedder::new(16)), &path)
            .unwrap()
            .embed_batch(&texts)
            .unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 2);

        let replay = ReplayEmbedder::open(&path, Some("hashing-fallback/d16".into()), 16).unwrap();
        let again = replay.embed_batch(&texts).unwrap();
        for (a, b) in first.iter().zip(&again) {
            let bits_a: Vec<u64> = a.values().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.values().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert!(matches!(
            replay.embed_batch(&["unseen".into()]),
            Err(EmbedError::CacheMiss { .. })
        ));
        let wrong_dim = ReplayEmbedder::open(&path, None, 8).unwrap();
        assert!(matches!(
            wrong_dim.embed_batch(&texts),
            Err(EmbedError::Dimension { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EmbeddingProviderConfig {
            kind: ProviderKind::RemoteHttp,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.kind = ProviderKind::ReplayFile;
        assert!(cfg.validate().is_err());
        assert!(EmbeddingProviderConfig::hashing(8).validate().is_ok());
    }

    #[test]
    fn remote_batches_and_retries() {
        let ok = |n: usize| {
            let items: Vec<String> = (0..n)
                .map(|i| format!(r#"{{"embedding":[1.0,{i}.0]}}"#))
                .collect();
            (200, format!(r#"{{"data":[{}]}}"#, items.join(",")))
        };
        let server = test_server::serve(vec![(503, "{}".into()), ok(2), ok(1)]);
        let cfg = EmbeddingProviderConfig {
            kind: ProviderKind::RemoteHttp,
            endpoint: Some(server.url.clone()),
            model_name: Some("m".into()),
            dimension: 2,
            batch_size: 2,
            max_in_flight: 1,
            ..Default::default()
        };
        let e = HttpEmbedder::new(&cfg).unwrap().with_retry_policy(RetryPolicy {
            retry_limit: 2,
            initial_backoff: std::time::Duration::from_millis(1),
            max_backoff: std::time::Duration::from_millis(1),
        });
        let out = e
            .embed_batch(&["a".into(), "b".into(), "c".into()])
            .unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[1].values(), &[1.0, 1.0]);
        let reqs = server.requests.lock().unwrap();
        assert_eq!(reqs.len(), 3);
        assert_eq!(reqs[1].body["input"], json!(["a", "b"]));
        assert_eq!(reqs[1].body["model"], json!("m"));
    }

    #[test]
    fn remote_dimension_mismatch_is_fatal() {
        let server = test_server::serve(vec![(200, r#"{"data":[{"embedding":[1.0]}]}"#.into())]);
        let cfg = EmbeddingProviderConfig {
            kind: ProviderKind::RemoteHttp,
            endpoint: Some(server.url.clone()),
            dimension: 2,
            ..Default::default()
        };
        let e = HttpEmbedder::new(&cfg).unwrap();
        assert!(matches!(
            e.embed_batch(&["a".into()]),
            Err(EmbedError::Dimension { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn remote_exhausted_retries_names_batch() {
        let server = test_server::serve(vec![(500, "{}".into())]);
        let cfg = EmbeddingProviderConfig {
            kind: ProviderKind::RemoteHttp,
            endpoint: Some(server.url.clone()),
            dimension: 2,
            batch_size: 1,
            max_in_flight: 1,
            ..Default::default()
        };
        let e = HttpEmbedder::new(&cfg).unwrap().with_retry_policy(RetryPolicy {
            retry_limit: 1,
            initial_backoff: std::time::Duration::from_millis(1),
            max_backoff: std::time::Duration::from_millis(1),
        });
        match e.embed_batch(&["a".into()]) {
            Err(EmbedError::Remote { batch: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, d)
            .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_scaled_and_bounded(
            a in vec_strategy(5),
            b in vec_strategy(5),
            alpha in 0.001f64..1000.0,
        ) {
            let (a, b) = (v(&a), v(&b));
            let ab = cosine_similarity(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
            let scaled = cosine_similarity(&a.scaled(alpha).unwrap(), &b).unwrap();
            prop_assert!((scaled - ab).abs() < 1e-9);
        }
    }
}
