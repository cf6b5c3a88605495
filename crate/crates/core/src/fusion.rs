//! Knowledge-fusion store: embed OCR and reasoning text, concatenate,
//! retrieve nearest memes by cosine similarity.
//!
//! Three index modes back the ablation matrix: `ocr` (OCR embedding only),
//! `fcs` (reasoning embedding only), `concat` (OCR segment then reasoning
//! segment). Retrieval is an exact exhaustive scan; corpus sizes make
//! anything fancier pointless and exactness keeps oracles assertable.

use std::fmt;
use std::io::{BufRead, Read};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusManifest, Split};
use crate::reasoner::ReasoningCache;
use crate::text::{fnv1a64, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    Ocr,
    Fcs,
    Concat,
}

impl IndexMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IndexMode::Ocr => "ocr",
            IndexMode::Fcs => "fcs",
            IndexMode::Concat => "concat",
        }
    }

    pub fn needs_reasoning(self) -> bool {
        matches!(self, IndexMode::Fcs | IndexMode::Concat)
    }

    pub fn needs_ocr(self) -> bool {
        matches!(self, IndexMode::Ocr | IndexMode::Concat)
    }
}

impl fmt::Display for IndexMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for IndexMode {
    type Err = FusionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ocr" => Ok(IndexMode::Ocr),
            "fcs" => Ok(IndexMode::Fcs),
            "concat" => Ok(IndexMode::Concat),
            other => Err(FusionError::ModeMismatch {
                detail: format!("unknown index mode: {other}"),
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("instances missing successful reasoning: {}", ids.join(", "))]
    MissingReasoning { ids: Vec<String> },
    #[error("query does not match index mode: {detail}")]
    ModeMismatch { detail: String },
    #[error("index has no entries")]
    EmptyIndex,
    #[error("index built with provider {expected}, query used {got}")]
    ProviderMismatch { expected: String, got: String },
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown embedding provider: {0}")]
    UnknownProvider(String),
    #[error("malformed index file: {0}")]
    MalformedIndex(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic text-to-vector mapping. A fixed provider id must always
/// produce the same vector for the same text.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;
}

/// Generates `dim` uniform values in [-1, 1) from a ChaCha8 stream seeded
/// by `seed`, as f64.
fn seeded_raw_vector(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| (rng.next_u32() as f64) / 4_294_967_296.0 * 2.0 - 1.0)
        .collect()
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Pseudo-random unit vectors seeded by the whole text.
///
/// The rule, exactly: seed = FNV-1a 64 of the UTF-8 bytes; draw `dim`
/// values as `next_u32() / 2^32 * 2 - 1` from ChaCha8 seeded with it;
/// L2-normalize in f64; cast to f32. Distinct texts land nearly
/// orthogonal, identical texts land identical.
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> &str {
        "hash_v1"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = seeded_raw_vector(fnv1a64(text.as_bytes()), self.dim);
        l2_normalize(&mut v);
        to_f32(v)
    }
}

/// Mean of per-token unit vectors, renormalized. Texts sharing tokens get
/// proportionally similar embeddings, which gives retrieval a lexical
/// signal the whole-text hash cannot.
///
/// Per-token vectors use the [`HashEmbedder`] rule seeded by the token;
/// a text with no tokens falls back to the empty token.
pub struct TokenHashEmbedder {
    dim: usize,
}

impl TokenHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        TokenHashEmbedder { dim }
    }
}

impl EmbeddingProvider for TokenHashEmbedder {
    fn id(&self) -> &str {
        "tokenhash_v1"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let tokens = tokenize(text);
        let mut acc = vec![0.0f64; self.dim];
        let count = tokens.len().max(1);
        if tokens.is_empty() {
            let mut v = seeded_raw_vector(fnv1a64(b""), self.dim);
            l2_normalize(&mut v);
            acc = v;
        } else {
            for token in &tokens {
                let mut v = seeded_raw_vector(fnv1a64(token.as_bytes()), self.dim);
                l2_normalize(&mut v);
                for (a, x) in acc.iter_mut().zip(&v) {
                    *a += x;
                }
            }
        }
        for a in acc.iter_mut() {
            *a /= count as f64;
        }
        l2_normalize(&mut acc);
        to_f32(acc)
    }
}

/// Instantiates a provider by kind name (`hash` or `tokenhash`).
pub fn make_provider(kind: &str, dim: usize) -> Result<Box<dyn EmbeddingProvider>, FusionError> {
    match kind {
        "hash" | "hash_v1" => Ok(Box::new(HashEmbedder::new(dim))),
        "tokenhash" | "tokenhash_v1" => Ok(Box::new(TokenHashEmbedder::new(dim))),
        other => Err(FusionError::UnknownProvider(other.to_string())),
    }
}

static ZERO_SIMILARITY_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// How many times cosine hit a zero vector and reported similarity 0.
pub fn zero_similarity_warnings() -> u64 {
    ZERO_SIMILARITY_WARNINGS.load(Ordering::Relaxed)
}

/// Cosine similarity with f64 accumulation, clamped to [-1, 1]. A zero
/// vector yields similarity 0 (degenerate inputs must not crash retrieval);
/// each such case bumps a process-wide warning counter.
pub fn cosine(u: &[f32], v: &[f32]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine requires equal dimensions");
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        ZERO_SIMILARITY_WARNINGS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)
}

/// One indexed meme.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub meme_id: String,
    pub vector: Vec<f32>,
}

/// Immutable embedding store for one split and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionIndex {
    pub mode: IndexMode,
    pub dimension: usize,
    pub provider_id: String,
    pub built_from_split: Split,
    pub segment_norm: bool,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub meme_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: Option<String>,
    pub hits: Vec<Hit>,
    pub k: usize,
}

/// Builds the mode-appropriate vector from the two text segments. In
/// concat mode the OCR segment comes first, the reasoning segment second;
/// with `segment_norm` on, each segment is independently L2-normalized
/// before concatenation so neither modality dominates the joint cosine.
pub fn embed_for_mode(
    provider: &dyn EmbeddingProvider,
    mode: IndexMode,
    ocr_text: Option<&str>,
    reasoning_text: Option<&str>,
    segment_norm: bool,
) -> Result<Vec<f32>, FusionError> {
    let need = |flag: bool, part: Option<&str>, name: &str| -> Result<Option<String>, FusionError> {
        match (flag, part) {
            (true, Some(t)) => Ok(Some(t.to_string())),
            (true, None) => Err(FusionError::ModeMismatch {
                detail: format!("mode {mode} requires {name} text"),
            }),
            (false, None) => Ok(None),
            (false, Some(_)) => Err(FusionError::ModeMismatch {
                detail: format!("mode {mode} does not take {name} text"),
            }),
        }
    };
    let ocr = need(mode.needs_ocr(), ocr_text, "ocr")?;
    let reasoning = need(mode.needs_reasoning(), reasoning_text, "reasoning")?;
    let maybe_norm = |v: Vec<f32>| -> Vec<f32> {
        if segment_norm {
            let mut f = v.iter().map(|&x| x as f64).collect::<Vec<_>>();
            l2_normalize(&mut f);
            to_f32(f)
        } else {
            v
        }
    };
    match mode {
        IndexMode::Ocr => Ok(provider.embed(&ocr.unwrap())),
        IndexMode::Fcs => Ok(provider.embed(&reasoning.unwrap())),
        IndexMode::Concat => {
            let mut joint = maybe_norm(provider.embed(&ocr.unwrap()));
            joint.extend(maybe_norm(provider.embed(&reasoning.unwrap())));
            Ok(joint)
        }
    }
}

/// Embeds every instance of one split, in manifest order. In `fcs` and
/// `concat` modes every instance must have a successful reasoning record;
/// otherwise all offenders are reported at once.
pub fn build_index(
    manifest: &CorpusManifest,
    cache: &ReasoningCache,
    mode: IndexMode,
    provider: &dyn EmbeddingProvider,
    split: Split,
    segment_norm: bool,
) -> Result<FusionIndex, FusionError> {
    if mode.needs_reasoning() {
        let missing: Vec<String> = manifest
            .split_instances(split)
            .filter(|inst| cache.success_for_meme(&inst.id).is_none())
            .map(|inst| inst.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(FusionError::MissingReasoning { ids: missing });
        }
    }
    let dimension = match mode {
        IndexMode::Concat => provider.dimension() * 2,
        _ => provider.dimension(),
    };
    let mut entries = Vec::new();
    for inst in manifest.split_instances(split) {
        let reasoning = if mode.needs_reasoning() {
            Some(
                cache
                    .success_for_meme(&inst.id)
                    .expect("checked above")
                    .reasoning_text()
                    .to_string(),
            )
        } else {
            None
        };
        let ocr = if mode.needs_ocr() {
            Some(inst.ocr_text.as_str())
        } else {
            None
        };
        let vector = embed_for_mode(provider, mode, ocr, reasoning.as_deref(), segment_norm)?;
        debug_assert_eq!(vector.len(), dimension);
        entries.push(IndexEntry {
            meme_id: inst.id.clone(),
            vector,
        });
    }
    Ok(FusionIndex {
        mode,
        dimension,
        provider_id: provider.id().to_string(),
        built_from_split: split,
        segment_norm,
        entries,
    })
}

impl FusionIndex {
    /// Ranks all entries against a prepared query vector: similarity
    /// descending, ties by ascending entry index, optional self-exclusion.
    pub fn query_vector(
        &self,
        vector: &[f32],
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<RetrievalResult, FusionError> {
        assert!(k >= 1, "k must be at least 1");
        if self.entries.is_empty() {
            return Err(FusionError::EmptyIndex);
        }
        if vector.len() != self.dimension {
            return Err(FusionError::DimensionMismatch {
                expected: self.dimension,
                got: vector.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| exclude_id != Some(e.meme_id.as_str()))
            .map(|(i, e)| (i, cosine(vector, &e.vector)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(RetrievalResult {
            query_id: exclude_id.map(str::to_string),
            hits: scored
                .into_iter()
                .map(|(i, score)| Hit {
                    meme_id: self.entries[i].meme_id.clone(),
                    score,
                })
                .collect(),
            k,
        })
    }

    /// Embeds the query texts per the index mode and ranks.
    pub fn query(
        &self,
        provider: &dyn EmbeddingProvider,
        ocr_text: Option<&str>,
        reasoning_text: Option<&str>,
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<RetrievalResult, FusionError> {
        if provider.id() != self.provider_id {
            return Err(FusionError::ProviderMismatch {
                expected: self.provider_id.clone(),
                got: provider.id().to_string(),
            });
        }
        let vector = embed_for_mode(
            provider,
            self.mode,
            ocr_text,
            reasoning_text,
            self.segment_norm,
        )?;
        self.query_vector(&vector, k, exclude_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    version: u32,
    mode: IndexMode,
    provider_id: String,
    dimension: usize,
    count: usize,
    segment_norm: bool,
    split: Split,
}

const INDEX_VERSION: u32 = 1;

/// Writes the index: one JSON header line, then one binary row per entry
/// (u32 little-endian id length, id bytes, dimension little-endian f32s).
pub fn save_index(index: &FusionIndex, path: &Path) -> Result<(), FusionError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let header = IndexHeader {
        version: INDEX_VERSION,
        mode: index.mode,
        provider_id: index.provider_id.clone(),
        dimension: index.dimension,
        count: index.entries.len(),
        segment_norm: index.segment_norm,
        split: index.built_from_split,
    };
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &header)
        .map_err(|e| FusionError::MalformedIndex(e.to_string()))?;
    out.push(b'\n');
    for entry in &index.entries {
        let id_bytes = entry.meme_id.as_bytes();
        out.extend_from_slice(&(id_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(id_bytes);
        for &x in &entry.vector {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<FusionIndex, FusionError> {
    let file = std::fs::File::open(path)?;
    let mut reader = std::io::BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: IndexHeader = serde_json::from_str(header_line.trim_end())
        .map_err(|e| FusionError::MalformedIndex(format!("bad header: {e}")))?;
    if header.version != INDEX_VERSION {
        return Err(FusionError::MalformedIndex(format!(
            "unsupported index version {}",
            header.version
        )));
    }
    let mut entries = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let mut len_buf = [0u8; 4];
        reader.read_exact(&mut len_buf)?;
        let id_len = u32::from_le_bytes(len_buf) as usize;
        let mut id_buf = vec![0u8; id_len];
        reader.read_exact(&mut id_buf)?;
        let meme_id = String::from_utf8(id_buf)
            .map_err(|e| FusionError::MalformedIndex(format!("bad id: {e}")))?;
        let mut vector = Vec::with_capacity(header.dimension);
        let mut val_buf = [0u8; 4];
        for _ in 0..header.dimension {
            reader.read_exact(&mut val_buf)?;
            vector.push(f32::from_le_bytes(val_buf));
        }
        entries.push(IndexEntry { meme_id, vector });
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(FusionError::MalformedIndex(
            "trailing bytes after last entry".to_string(),
        ));
    }
    Ok(FusionIndex {
        mode: header.mode,
        dimension: header.dimension,
        provider_id: header.provider_id,
        built_from_split: header.split,
        segment_norm: header.segment_norm,
        entries,
    })
}
