//! Pluggable sentence-encoder backends and the embedding pipeline.
//!
//! Two backend kinds ship: a deterministic seeded-hash test backend (no
//! model, no network; closes the loop for offline end-to-end runs) and a
//! remote backend speaking the `POST /embed` JSON protocol, which is how the
//! engine reaches real encoder models without bundling inference.

mod cache;

pub use cache::{content_hash, EmbeddingCache};

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Model identifier of the shipped BioBERT-variant sentence encoder.
pub const BIOBERT_MODEL: &str = "pritamdeka/BioBERT-mnli-snli-scinli-scitail-mednli-stsb";
/// Model identifier of the shipped PubMedBERT-variant sentence encoder.
pub const PUBMEDBERT_MODEL: &str = "NeuML/pubmedbert-base-embeddings";

/// Batch size per backend call.
const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("backend {backend_id} unavailable: {reason}")]
    BackendUnavailable { backend_id: String, reason: String },
    #[error("backend {backend_id} returned dimension {got}, expected {expected}")]
    DimensionMismatch {
        backend_id: String,
        expected: usize,
        got: usize,
    },
    #[error("backend {backend_id} protocol error: {reason}")]
    Protocol { backend_id: String, reason: String },
    #[error("cache {path}: {reason}")]
    Cache { path: String, reason: String },
    #[error("cache conflict: recomputed vector differs from stored vector for identical content")]
    CacheConflict,
    #[error("invalid backend spec: {0}")]
    BadSpec(String),
}

/// Token pooling applied by the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
}

/// How a backend produces vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BackendKind {
    /// Deterministic seeded-hash vectors; no model involved.
    Test { seed: u64 },
    /// Remote embedding service speaking `POST {endpoint}/embed`.
    Remote { endpoint: String },
}

/// Description of one encoder backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub backend_id: String,
    pub model_identifier: String,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "default_max_sequence_tokens")]
    pub max_sequence_tokens: usize,
    #[serde(default = "default_normalize")]
    pub normalize_output: bool,
    pub kind: BackendKind,
}

fn default_dimension() -> usize {
    768
}

fn default_max_sequence_tokens() -> usize {
    512
}

fn default_normalize() -> bool {
    true
}

impl BackendSpec {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.backend_id.trim().is_empty() {
            return Err(EmbedError::BadSpec("empty backend_id".into()));
        }
        if self.dimension == 0 {
            return Err(EmbedError::BadSpec("dimension must be positive".into()));
        }
        if self.max_sequence_tokens == 0 {
            return Err(EmbedError::BadSpec(
                "max_sequence_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The shipped BioBERT-variant spec.
    pub fn biobert(kind: BackendKind) -> Self {
        Self {
            backend_id: "biobert".into(),
            model_identifier: BIOBERT_MODEL.into(),
            dimension: 768,
            pooling: Pooling::Mean,
            max_sequence_tokens: 512,
            normalize_output: true,
            kind,
        }
    }

    /// The shipped PubMedBERT-variant spec.
    pub fn pubmedbert(kind: BackendKind) -> Self {
        Self {
            backend_id: "pubmedbert".into(),
            model_identifier: PUBMEDBERT_MODEL.into(),
            dimension: 768,
            pooling: Pooling::Mean,
            max_sequence_tokens: 512,
            normalize_output: true,
            kind,
        }
    }
}

/// A backend-tagged fixed-dimension vector for one canonical item text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub backend_id: String,
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Scales values to unit Euclidean norm, accumulating in f64.
pub fn normalize_in_place(values: &mut [f32]) {
    let norm = values
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for v in values.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
}

/// A sentence-encoder backend. Implementations return raw (pre-normalize)
/// vectors; the pipeline applies truncation, normalization, and dimension
/// checks.
pub trait Backend: Send + Sync {
    fn spec(&self) -> &BackendSpec;
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Instantiates the backend named by a spec. `seed_override` replaces a test
/// backend's configured seed (the CLI `--seed` flag).
pub fn make_backend(spec: &BackendSpec, seed_override: Option<u64>) -> Box<dyn Backend> {
    match &spec.kind {
        BackendKind::Test { seed } => Box::new(TestBackend::new(
            spec.clone(),
            seed_override.unwrap_or(*seed),
        )),
        BackendKind::Remote { endpoint } => {
            Box::new(RemoteBackend::new(spec.clone(), endpoint.clone()))
        }
    }
}

/// Counters produced by one embedding pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmbedStats {
    pub texts: usize,
    pub cache_hits: usize,
    pub backend_calls: usize,
    pub truncated: usize,
}

/// Whitespace-token truncation. Real subword truncation belongs to the
/// encoder; this bound keeps request payloads sane and is logged when hit.
fn truncate_tokens(text: &str, max_tokens: usize) -> Option<String> {
    let mut end = 0usize;
    let mut count = 0usize;
    let mut in_token = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            in_token = false;
        } else {
            if !in_token {
                count += 1;
                if count > max_tokens {
                    return Some(text[..end].to_string());
                }
                in_token = true;
            }
            end = i + ch.len_utf8();
        }
    }
    None
}

/// Embeds texts in order: one vector per input text.
pub fn embed_texts(
    backend: &dyn Backend,
    texts: &[String],
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    embed_texts_with_stats(backend, texts).map(|(vectors, _)| vectors)
}

/// Embeds texts in order, reporting batch/truncation counters.
pub fn embed_texts_with_stats(
    backend: &dyn Backend,
    texts: &[String],
) -> Result<(Vec<EmbeddingVector>, EmbedStats), EmbedError> {
    let spec = backend.spec().clone();
    spec.validate()?;
    let mut stats = EmbedStats {
        texts: texts.len(),
        ..EmbedStats::default()
    };
    let mut prepared: Vec<String> = Vec::with_capacity(texts.len());
    for text in texts {
        match truncate_tokens(text, spec.max_sequence_tokens) {
            Some(truncated) => {
                log::warn!(
                    "backend {}: text truncated to {} tokens",
                    spec.backend_id,
                    spec.max_sequence_tokens
                );
                stats.truncated += 1;
                prepared.push(truncated);
            }
            None => prepared.push(text.clone()),
        }
    }
    let mut vectors = Vec::with_capacity(texts.len());
    for chunk in prepared.chunks(EMBED_BATCH.max(1)) {
        let raw = backend.embed_raw(chunk)?;
        stats.backend_calls += 1;
        if raw.len() != chunk.len() {
            return Err(EmbedError::Protocol {
                backend_id: spec.backend_id.clone(),
                reason: format!("returned {} vectors for {} texts", raw.len(), chunk.len()),
            });
        }
        for mut values in raw {
            if values.len() != spec.dimension {
                return Err(EmbedError::DimensionMismatch {
                    backend_id: spec.backend_id.clone(),
                    expected: spec.dimension,
                    got: values.len(),
                });
            }
            if spec.normalize_output {
                normalize_in_place(&mut values);
            }
            vectors.push(EmbeddingVector {
                backend_id: spec.backend_id.clone(),
                values,
                normalized: spec.normalize_output,
            });
        }
    }
    Ok((vectors, stats))
}

/// Cache-aware embedding: only cache misses reach the backend, and every
/// fresh vector is written back. Cache hits return bit-identical vectors.
pub fn embed_with_cache(
    backend: &dyn Backend,
    cache: &mut EmbeddingCache,
    texts: &[String],
) -> Result<(Vec<EmbeddingVector>, EmbedStats), EmbedError> {
    let spec = backend.spec();
    spec.validate()?;
    let mut stats = EmbedStats {
        texts: texts.len(),
        ..EmbedStats::default()
    };
    let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
    let mut miss_idx: Vec<usize> = Vec::new();
    let mut miss_texts: Vec<String> = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        if let Some(values) = cache.get(text) {
            stats.cache_hits += 1;
            out[i] = Some(EmbeddingVector {
                backend_id: spec.backend_id.clone(),
                values: values.to_vec(),
                normalized: spec.normalize_output,
            });
        } else {
            miss_idx.push(i);
            miss_texts.push(text.clone());
        }
    }
    if !miss_texts.is_empty() {
        let (fresh, fresh_stats) = embed_texts_with_stats(backend, &miss_texts)?;
        stats.backend_calls = fresh_stats.backend_calls;
        stats.truncated = fresh_stats.truncated;
        for (slot, vector) in miss_idx.into_iter().zip(fresh) {
            cache.put(&texts[slot], &vector)?;
            out[slot] = Some(vector);
        }
    }
    Ok((out.into_iter().map(|v| v.unwrap()).collect(), stats))
}

/// Deterministic seeded-hash backend: the content hash of
/// (backend id, seed, text) expands into a fixed pseudo-random sequence of
/// `dimension` reals. Same inputs give bit-identical vectors on every
/// platform.
pub struct TestBackend {
    spec: BackendSpec,
    seed: u64,
    calls: AtomicUsize,
}

impl TestBackend {
    pub fn new(spec: BackendSpec, seed: u64) -> Self {
        Self {
            spec,
            seed,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of `embed_raw` invocations served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Expands (backend_id, seed, text) into `dim` floats in [-1, 1) via
/// counter-mode SHA-256.
pub fn seeded_hash_values(backend_id: &str, seed: u64, text: &str, dim: usize) -> Vec<f32> {
    let mut hasher = Sha256::new();
    hasher.update(backend_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(text.as_bytes());
    let key = hasher.finalize();
    let mut values = Vec::with_capacity(dim);
    let mut counter: u32 = 0;
    while values.len() < dim {
        let mut block = Sha256::new();
        block.update(key);
        block.update(counter.to_le_bytes());
        let bytes = block.finalize();
        for chunk in bytes.chunks_exact(4) {
            if values.len() == dim {
                break;
            }
            let word = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            values.push((word as f64 / 2147483648.0 - 1.0) as f32);
        }
        counter += 1;
    }
    values
}

impl Backend for TestBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts
            .iter()
            .map(|t| seeded_hash_values(&self.spec.backend_id, self.seed, t, self.spec.dimension))
            .collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    model: String,
    dimension: usize,
    vectors: Vec<Vec<f32>>,
}

/// Client for the remote embedding protocol.
pub struct RemoteBackend {
    spec: BackendSpec,
    url: String,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(spec: BackendSpec, endpoint: String) -> Self {
        let base = endpoint.trim_end_matches('/');
        Self {
            url: format!("{base}/embed"),
            spec,
            agent: ureq::Agent::new_with_defaults(),
        }
    }
}

impl Backend for RemoteBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let request = EmbedRequest {
            model: &self.spec.model_identifier,
            texts,
        };
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(&request)
            .map_err(|err| EmbedError::BackendUnavailable {
                backend_id: self.spec.backend_id.clone(),
                reason: err.to_string(),
            })?;
        let body: EmbedResponse =
            response
                .body_mut()
                .read_json()
                .map_err(|err| EmbedError::Protocol {
                    backend_id: self.spec.backend_id.clone(),
                    reason: err.to_string(),
                })?;
        if body.dimension != self.spec.dimension {
            return Err(EmbedError::DimensionMismatch {
                backend_id: self.spec.backend_id.clone(),
                expected: self.spec.dimension,
                got: body.dimension,
            });
        }
        if body.model != self.spec.model_identifier {
            log::warn!(
                "backend {}: service reported model {} (requested {})",
                self.spec.backend_id,
                body.model,
                self.spec.model_identifier
            );
        }
        Ok(body.vectors)
    }
}
