//! Embeddings and an exact flat similarity index.
//!
//! The default embedder is signed feature hashing over lowercase
//! alphanumeric word tokens, which is offline and deterministic. A remote
//! embeddings endpoint can be plugged in through the same [`Embedder`]
//! trait.
//!
//! On-disk layout of an index (`<path>`):
//!
//! ```text
//! "GSIX1" | dim: u32 LE | count: u32 LE | count x (chunk_id: u32 LE, dim x f32 LE)
//! ```
//!
//! Chunk texts and index metadata live next to it in `<path>.meta.jsonl`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DocumentChunk;

pub const DEFAULT_DIM: usize = 256;
pub const INDEX_MAGIC: &[u8; 5] = b"GSIX1";

#[derive(Debug, Error)]
pub enum VectorError {
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("dimension mismatch: index has {index}, query has {query}")]
    DimMismatch { index: usize, query: usize },
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(u32),
    #[error("corrupt index {path}: {reason}")]
    CorruptIndex { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    /// Normalize raw values to unit length; an all-zero input stays zero.
    pub fn normalized(raw: &[f64]) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self::zeros(raw.len());
        }
        Self {
            values: raw.iter().map(|v| (v / norm) as f32).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Cosine similarity; defined as 0 when either side is the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, VectorError>;
}

/// Signed feature hashing of word tokens into a fixed dimension.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be at least 1");
        Self { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIM)
    }
}

/// Lowercase runs of alphanumeric characters.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

// 64-bit FNV-1a: stable across platforms and releases, unlike std's hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-v1-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, VectorError> {
        let mut raw = vec![0.0f64; self.dim];
        for token in word_tokens(text) {
            let h = fnv1a(token.as_bytes());
            let slot = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            raw[slot] += sign;
        }
        Ok(EmbeddingVector::normalized(&raw))
    }
}

/// Remote embeddings endpoint (`POST {base_url}/embeddings`).
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dim: usize,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingsDatum>,
}

#[derive(Deserialize)]
struct EmbeddingsDatum {
    embedding: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}:{}", self.model, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, VectorError> {
        if text.trim().is_empty() {
            return Ok(EmbeddingVector::zeros(self.dim));
        }
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": text });
        let mut resp = req
            .send_json(&body)
            .map_err(|e| VectorError::BackendUnavailable(e.to_string()))?;
        let parsed: EmbeddingsResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| VectorError::BackendUnavailable(format!("bad embeddings response: {e}")))?;
        let raw = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| VectorError::BackendUnavailable("empty embeddings response".into()))?
            .embedding;
        if raw.len() != self.dim {
            return Err(VectorError::DimMismatch {
                index: self.dim,
                query: raw.len(),
            });
        }
        Ok(EmbeddingVector::normalized(&raw))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: u32,
    pub source_id: String,
    pub heading_path: Vec<String>,
    pub text: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMetadata {
    pub embedder: String,
    /// Seconds since the Unix epoch.
    pub built_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
    pub metadata: IndexMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: u32,
    pub score: f64,
    pub source_id: String,
    pub heading_path: Vec<String>,
    pub text: String,
}

pub fn build_index(chunks: &[DocumentChunk], embedder: &dyn Embedder) -> Result<VectorIndex, VectorError> {
    let built_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    build_index_at(chunks, embedder, built_at)
}

/// Like [`build_index`] with a caller-supplied build timestamp.
pub fn build_index_at(
    chunks: &[DocumentChunk],
    embedder: &dyn Embedder,
    built_at: u64,
) -> Result<VectorIndex, VectorError> {
    let mut seen = std::collections::HashSet::with_capacity(chunks.len());
    let mut entries = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        if !seen.insert(chunk.chunk_id) {
            return Err(VectorError::DuplicateChunk(chunk.chunk_id));
        }
        let vector = embedder.embed(&chunk.text)?;
        if vector.dim() != embedder.dim() {
            return Err(VectorError::DimMismatch {
                index: embedder.dim(),
                query: vector.dim(),
            });
        }
        entries.push(IndexEntry {
            chunk_id: chunk.chunk_id,
            source_id: chunk.source_id.clone(),
            heading_path: chunk.heading_path.clone(),
            text: chunk.text.clone(),
            vector,
        });
    }
    Ok(VectorIndex {
        dim: embedder.dim(),
        entries,
        metadata: IndexMetadata {
            embedder: embedder.id(),
            built_at,
        },
    })
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact top-k by cosine, score descending, ties by ascending chunk id.
    pub fn search(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit>, VectorError> {
        if query.dim() != self.dim {
            return Err(VectorError::DimMismatch {
                index: self.dim,
                query: query.dim(),
            });
        }
        let mut scored: Vec<(f64, &IndexEntry)> = self.entries.iter().map(|e| (cosine(query, &e.vector), e)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.chunk_id.cmp(&b.1.chunk_id)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, e)| RetrievalHit {
                chunk_id: e.chunk_id,
                score,
                source_id: e.source_id.clone(),
                heading_path: e.heading_path.clone(),
                text: e.text.clone(),
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.entries.len() * (4 + 4 * self.dim));
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.chunk_id.to_le_bytes());
            for v in &e.vector.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), VectorError> {
        let path = path.as_ref();
        let io = |source| VectorError::Io {
            path: path.to_path_buf(),
            source,
        };
        fs::write(path, self.to_bytes()).map_err(io)?;
        let meta_path = meta_path(path);
        let mut meta = Vec::new();
        serde_json::to_writer(&mut meta, &self.metadata).expect("metadata serializes");
        meta.push(b'\n');
        for e in &self.entries {
            let line = MetaLine {
                chunk_id: e.chunk_id,
                source_id: &e.source_id,
                heading_path: &e.heading_path,
                text: &e.text,
            };
            serde_json::to_writer(&mut meta, &line).expect("entry serializes");
            meta.push(b'\n');
        }
        let mut f = fs::File::create(&meta_path).map_err(|source| VectorError::Io {
            path: meta_path.clone(),
            source,
        })?;
        f.write_all(&meta).map_err(|source| VectorError::Io {
            path: meta_path,
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VectorError> {
        let path = path.as_ref();
        let corrupt = |reason: &str| VectorError::CorruptIndex {
            path: path.to_path_buf(),
            reason: reason.to_owned(),
        };
        let bytes = fs::read(path).map_err(|source| VectorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if bytes.len() < 13 || &bytes[..5] != INDEX_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let dim = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(corrupt("zero dimension"));
        }
        let expected = 13 + count * (4 + 4 * dim);
        if bytes.len() != expected {
            return Err(corrupt(&format!("expected {expected} bytes, found {}", bytes.len())));
        }

        let meta_path = meta_path(path);
        let meta_text = fs::read_to_string(&meta_path).map_err(|source| VectorError::Io {
            path: meta_path.clone(),
            source,
        })?;
        let mut lines = meta_text.lines();
        let metadata: IndexMetadata = lines
            .next()
            .and_then(|l| serde_json::from_str(l).ok())
            .ok_or_else(|| corrupt("missing metadata header"))?;
        let metas: Vec<OwnedMetaLine> = lines
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| corrupt(&format!("bad metadata line: {e}")))?;
        if metas.len() != count {
            return Err(corrupt("metadata entry count differs from index"));
        }

        let mut entries = Vec::with_capacity(count);
        let mut pos = 13;
        for meta in metas {
            let chunk_id = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            pos += 4;
            if chunk_id != meta.chunk_id {
                return Err(corrupt("metadata chunk id differs from index"));
            }
            let values = bytes[pos..pos + 4 * dim]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            pos += 4 * dim;
            entries.push(IndexEntry {
                chunk_id,
                source_id: meta.source_id,
                heading_path: meta.heading_path,
                text: meta.text,
                vector: EmbeddingVector { values },
            });
        }
        Ok(Self { dim, entries, metadata })
    }
}

pub fn meta_path(index_path: &Path) -> PathBuf {
    let mut name = index_path.as_os_str().to_owned();
    name.push(".meta.jsonl");
    PathBuf::from(name)
}

#[derive(Serialize)]
struct MetaLine<'a> {
    chunk_id: u32,
    source_id: &'a str,
    heading_path: &'a [String],
    text: &'a str,
}

#[derive(Deserialize)]
struct OwnedMetaLine {
    chunk_id: u32,
    source_id: String,
    #[serde(default)]
    heading_path: Vec<String>,
    text: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;
    use rand::{Rng, SeedableRng};

    fn chunk(id: u32, text: &str) -> DocumentChunk {
        DocumentChunk {
            chunk_id: id,
            source_id: "s".into(),
            span: Span::new(0, text.chars().count().max(1)),
            text: text.into(),
            heading_path: Vec::new(),
        }
    }

    fn sample_index() -> VectorIndex {
        let chunks = vec![
            chunk(0, "runpf runs an AC power flow"),
            chunk(1, "rundcpf runs a DC power flow"),
            chunk(2, "runopf solves an optimal power flow with gencost"),
        ];
        build_index_at(&chunks, &HashingEmbedder::default(), 7).unwrap()
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let e = HashingEmbedder::default();
        let v = e.embed("").unwrap();
        assert_eq!(v.dim(), 256);
        assert!(v.is_zero());
        assert!(e.embed("  \n\t ").unwrap().is_zero());
    }

    #[test]
    fn hashing_is_deterministic_and_unit_norm() {
        let e = HashingEmbedder::default();
        let a = e.embed("power flow").unwrap();
        assert_eq!(a, e.embed("power flow").unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bag_of_words_is_order_invariant() {
        let e = HashingEmbedder::default();
        let a = e.embed("run power flow").unwrap();
        let b = e.embed("power flow run").unwrap();
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-9);
        let c = e.embed("RUN, Power... flow!").unwrap();
        assert!((cosine(&a, &c) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn build_preserves_order_and_dim() {
        let idx = sample_index();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.dim, 256);
        assert_eq!(
            idx.entries.iter().map(|e| e.chunk_id).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );

        let empty = build_index(&[], &HashingEmbedder::default()).unwrap();
        assert!(empty.search(&EmbeddingVector::zeros(256), 3).unwrap().is_empty());

        let dup = [chunk(4, "a"), chunk(4, "b")];
        assert!(matches!(
            build_index(&dup, &HashingEmbedder::default()),
            Err(VectorError::DuplicateChunk(4))
        ));
    }

    #[test]
    fn self_similarity_and_clamping() {
        let idx = sample_index();
        let q = HashingEmbedder::default().embed(&idx.entries[2].text).unwrap();
        let hits = idx.search(&q, 10).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].chunk_id, 2);
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert!(matches!(
            idx.search(&EmbeddingVector::zeros(8), 1),
            Err(VectorError::DimMismatch { index: 256, query: 8 })
        ));
    }

    #[test]
    fn identical_texts_tie_by_chunk_id() {
        let chunks = vec![
            chunk(5, "other words entirely"),
            chunk(3, "bus data"),
            chunk(1, "bus data"),
        ];
        let idx = build_index_at(&chunks, &HashingEmbedder::default(), 0).unwrap();
        let q = HashingEmbedder::default().embed("bus data").unwrap();
        let hits = idx.search(&q, 3).unwrap();
        assert_eq!(hits[0].chunk_id, 1);
        assert_eq!(hits[1].chunk_id, 3);
        assert_eq!(hits[0].score, hits[1].score);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.gsix");
        let idx = sample_index();
        idx.persist(&path).unwrap();
        let loaded = VectorIndex::load(&path).unwrap();
        assert_eq!(loaded, idx);

        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..5 {
            let raw: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = EmbeddingVector::normalized(&raw);
            assert_eq!(idx.search(&q, 3).unwrap(), loaded.search(&q, 3).unwrap());
        }

        let empty = build_index_at(&[], &HashingEmbedder::default(), 1).unwrap();
        let epath = dir.path().join("empty.gsix");
        empty.persist(&epath).unwrap();
        assert_eq!(VectorIndex::load(&epath).unwrap(), empty);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        sample_index().persist(&a).unwrap();
        sample_index().persist(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(fs::read(meta_path(&a)).unwrap(), fs::read(meta_path(&b)).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.gsix");
        sample_index().persist(&path).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            VectorIndex::load(&path),
            Err(VectorError::CorruptIndex { .. })
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            VectorIndex::load(&path),
            Err(VectorError::CorruptIndex { .. })
        ));

        fs::write(&path, b"GSI").unwrap();
        assert!(matches!(
            VectorIndex::load(&path),
            Err(VectorError::CorruptIndex { .. })
        ));
    }
}
