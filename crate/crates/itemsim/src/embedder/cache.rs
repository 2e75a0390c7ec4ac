//! Append-only binary vector cache, one file per backend.
//!
//! Layout: magic `EMBCACHE1`, then `u32` backend-id length + UTF-8 bytes,
//! then `u32` dimension, then records of (32-byte content hash,
//! dimension x f32 little-endian). A corrupt or mismatched file is treated
//! as a cold cache with a warning, never a hard error.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{EmbedError, EmbeddingVector};

const MAGIC: &[u8; 9] = b"EMBCACHE1";

/// SHA-256 of the canonical text, the cache record key.
pub fn content_hash(text: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.finalize().into()
}

/// On-disk embedding cache bound to one backend id and dimension.
pub struct EmbeddingCache {
    path: PathBuf,
    backend_id: String,
    dimension: usize,
    entries: HashMap<[u8; 32], Vec<f32>>,
    writer: File,
}

impl EmbeddingCache {
    /// Opens (or creates) the cache file for a backend. Any corruption or
    /// header mismatch resets the file to an empty cache with a warning.
    pub fn open(path: &Path, backend_id: &str, dimension: usize) -> Result<Self, EmbedError> {
        let entries = match read_entries(path, backend_id, dimension) {
            Ok(Some(entries)) => Some(entries),
            Ok(None) => None,
            Err(reason) => {
                log::warn!(
                    "cache {}: {reason}; treating as cold cache",
                    path.display()
                );
                None
            }
        };
        let (entries, recreate) = match entries {
            Some(entries) => (entries, false),
            None => (HashMap::new(), true),
        };
        if recreate {
            let mut file = File::create(path).map_err(|e| EmbedError::Cache {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            write_header(&mut file, backend_id, dimension).map_err(|e| EmbedError::Cache {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        }
        let writer = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| EmbedError::Cache {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        Ok(Self {
            path: path.to_path_buf(),
            backend_id: backend_id.to_string(),
            dimension,
            entries,
            writer,
        })
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Stored vector values for a text, if present.
    pub fn get(&self, text: &str) -> Option<&[f32]> {
        self.entries.get(&content_hash(text)).map(|v| v.as_slice())
    }

    /// Stores a vector. Re-putting identical values is a no-op; differing
    /// values for the same content are refused rather than silently altered.
    pub fn put(&mut self, text: &str, vector: &EmbeddingVector) -> Result<(), EmbedError> {
        if vector.backend_id != self.backend_id {
            return Err(EmbedError::Cache {
                path: self.path.display().to_string(),
                reason: format!(
                    "vector from backend {} cannot enter cache for {}",
                    vector.backend_id, self.backend_id
                ),
            });
        }
        if vector.values.len() != self.dimension {
            return Err(EmbedError::DimensionMismatch {
                backend_id: self.backend_id.clone(),
                expected: self.dimension,
                got: vector.values.len(),
            });
        }
        let key = content_hash(text);
        if let Some(existing) = self.entries.get(&key) {
            if existing == &vector.values {
                return Ok(());
            }
            return Err(EmbedError::CacheConflict);
        }
        let mut record = Vec::with_capacity(32 + self.dimension * 4);
        record.extend_from_slice(&key);
        for v in &vector.values {
            record.extend_from_slice(&v.to_le_bytes());
        }
        self.writer
            .write_all(&record)
            .and_then(|_| self.writer.flush())
            .map_err(|e| EmbedError::Cache {
                path: self.path.display().to_string(),
                reason: e.to_string(),
            })?;
        self.entries.insert(key, vector.values.clone());
        Ok(())
    }
}

fn write_header(file: &mut File, backend_id: &str, dimension: usize) -> std::io::Result<()> {
    file.write_all(MAGIC)?;
    let id = backend_id.as_bytes();
    file.write_all(&(id.len() as u32).to_le_bytes())?;
    file.write_all(id)?;
    file.write_all(&(dimension as u32).to_le_bytes())?;
    Ok(())
}

/// Ok(None): file absent. Err: corrupt or mismatched (caller goes cold).
fn read_entries(
    path: &Path,
    backend_id: &str,
    dimension: usize,
) -> Result<Option<HashMap<[u8; 32], Vec<f32>>>, String> {
    let mut file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.to_string()),
    };
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], String> {
        if *pos + n > bytes.len() {
            return Err("truncated header".into());
        }
        let slice = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(slice)
    };
    if take(&mut pos, MAGIC.len())? != MAGIC {
        return Err("bad magic".into());
    }
    let id_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let id = String::from_utf8(take(&mut pos, id_len)?.to_vec()).map_err(|e| e.to_string())?;
    if id != backend_id {
        return Err(format!("backend_id {id} does not match {backend_id}"));
    }
    let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if dim != dimension {
        return Err(format!("dimension {dim} does not match {dimension}"));
    }
    let record_len = 32 + dim * 4;
    let body = &bytes[pos..];
    if body.len() % record_len != 0 {
        return Err("truncated record".into());
    }
    let mut entries = HashMap::with_capacity(body.len() / record_len);
    for record in body.chunks_exact(record_len) {
        let mut key = [0u8; 32];
        key.copy_from_slice(&record[..32]);
        let values: Vec<f32> = record[32..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.insert(key, values);
    }
    Ok(Some(entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{
        embed_with_cache, BackendKind, BackendSpec, Pooling, TestBackend,
    };

    fn spec(dim: usize) -> BackendSpec {
        BackendSpec {
            backend_id: "hashenc".into(),
            model_identifier: "test/hash".into(),
            dimension: dim,
            pooling: Pooling::Mean,
            max_sequence_tokens: 512,
            normalize_output: true,
            kind: BackendKind::Test { seed: 7 },
        }
    }

    fn vector(dim: usize, fill: f32) -> EmbeddingVector {
        EmbeddingVector {
            backend_id: "hashenc".into(),
            values: vec![fill; dim],
            normalized: false,
        }
    }

    #[test]
    fn put_then_get_returns_same_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hashenc.embcache");
        let mut cache = EmbeddingCache::open(&path, "hashenc", 4).unwrap();
        assert!(cache.get("text").is_none());
        let v = vector(4, 0.25);
        cache.put("text", &v).unwrap();
        assert_eq!(cache.get("text").unwrap(), v.values.as_slice());
    }

    #[test]
    fn reopen_preserves_bit_identical_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hashenc.embcache");
        let v = vector(3, 0.1234567);
        {
            let mut cache = EmbeddingCache::open(&path, "hashenc", 3).unwrap();
            cache.put("t", &v).unwrap();
        }
        let cache = EmbeddingCache::open(&path, "hashenc", 3).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.get("t").unwrap(), v.values.as_slice());
    }

    #[test]
    fn conflicting_put_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hashenc.embcache");
        let mut cache = EmbeddingCache::open(&path, "hashenc", 2).unwrap();
        cache.put("t", &vector(2, 0.5)).unwrap();
        cache.put("t", &vector(2, 0.5)).unwrap();
        let err = cache.put("t", &vector(2, 0.75)).unwrap_err();
        assert!(matches!(err, EmbedError::CacheConflict));
    }

    #[test]
    fn corrupt_file_is_treated_as_cold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hashenc.embcache");
        std::fs::write(&path, b"not a cache file at all").unwrap();
        let cache = EmbeddingCache::open(&path, "hashenc", 4).unwrap();
        assert!(cache.is_empty());
    }

    #[test]
    fn truncated_tail_is_treated_as_cold() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hashenc.embcache");
        {
            let mut cache = EmbeddingCache::open(&path, "hashenc", 2).unwrap();
            cache.put("t", &vector(2, 0.5)).unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        let cache = EmbeddingCache::open(&path, "hashenc", 2).unwrap();
        assert!(cache.is_empty());
    }

    #[test]
    fn warm_cache_issues_zero_backend_calls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hashenc.embcache");
        let backend = TestBackend::new(spec(16), 7);
        let texts: Vec<String> = (0..10).map(|i| format!("item {i}")).collect();
        let first = {
            let mut cache = EmbeddingCache::open(&path, "hashenc", 16).unwrap();
            let (vectors, stats) = embed_with_cache(&backend, &mut cache, &texts).unwrap();
            assert_eq!(stats.cache_hits, 0);
            assert!(stats.backend_calls > 0);
            vectors
        };
        let mut cache = EmbeddingCache::open(&path, "hashenc", 16).unwrap();
        let (vectors, stats) = embed_with_cache(&backend, &mut cache, &texts).unwrap();
        assert_eq!(stats.backend_calls, 0);
        assert_eq!(stats.cache_hits, texts.len());
        assert_eq!(backend.calls(), 1);
        assert_eq!(vectors, first);
    }
}
