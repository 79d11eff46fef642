//! Exact cosine-distance kNN over embedded chunks.
//!
//! The index is a flat list scanned in full for every query; top-k selection
//! keeps a bounded max-heap. Results are ordered by distance, then chunk id,
//! so identical inputs always produce identical hit lists.

mod embed;
mod persist;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Chunk;

pub use embed::{tokenize, Embedder, HashedBagOfWords, RemoteEmbedder, RemoteEmbedderConfig, DEFAULT_HASHED_DIM};
pub use persist::{load_index, save_index, FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("dimension mismatch: index expects {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vector has a non-finite component")]
    NonFinite,
    #[error("vector has zero length")]
    ZeroVector,
    #[error("the index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt index file: {0}")]
    CorruptIndex(String),
    #[error("index format version {found} is newer than supported version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
}

/// Finite, non-zero embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(components: Vec<f32>) -> Result<Self, IndexError> {
        if components.iter().any(|c| !c.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        if components.iter().all(|c| *c == 0.0) {
            return Err(IndexError::ZeroVector);
        }
        Ok(Self(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f32] {
        &self.0
    }

    fn unit(&self) -> Vec<f64> {
        let norm = self.0.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        self.0.iter().map(|x| f64::from(*x) / norm).collect()
    }
}

impl TryFrom<Vec<f32>> for Vector {
    type Error = IndexError;

    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f32> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// `1 - cos(a, b)`, computed as half the squared distance between the unit
/// vectors. That form is exactly zero for identical inputs and exactly
/// symmetric. Clamped to `[0, 2]`.
pub fn cosine_distance(a: &Vector, b: &Vector) -> f64 {
    unit_distance(&a.unit(), &b.unit())
}

fn unit_distance(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (0.5 * sq).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CosineDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub dim: usize,
    pub metric: Metric,
    pub k_default: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_HASHED_DIM,
            metric: Metric::CosineDistance,
            k_default: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkRef {
    pub chunk_id: String,
    pub doc_id: String,
}

impl From<&Chunk> for ChunkRef {
    fn from(c: &Chunk) -> Self {
        Self {
            chunk_id: c.chunk_id.clone(),
            doc_id: c.doc_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_ref: ChunkRef,
    pub distance: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStats {
    pub count: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
struct Entry {
    chunk_ref: ChunkRef,
    vector: Vector,
    unit: Vec<f64>,
}

/// In-memory exact index. Queries take `&self` and may run concurrently;
/// writes take `&mut self`, so the borrow checker enforces a single writer.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    config: IndexConfig,
    embedder_id: String,
    entries: BTreeMap<String, Entry>,
}

impl VectorIndex {
    pub fn new(config: IndexConfig, embedder_id: impl Into<String>) -> Self {
        Self {
            config,
            embedder_id: embedder_id.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.entries.contains_key(chunk_id)
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats {
            count: self.entries.len(),
            dim: self.config.dim,
        }
    }

    /// Inserts or replaces the vector stored for `chunk_ref.chunk_id`.
    pub fn insert(&mut self, chunk_ref: ChunkRef, vector: Vector) -> Result<(), IndexError> {
        if vector.dim() != self.config.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.config.dim,
                found: vector.dim(),
            });
        }
        let unit = vector.unit();
        self.entries.insert(
            chunk_ref.chunk_id.clone(),
            Entry {
                chunk_ref,
                vector,
                unit,
            },
        );
        Ok(())
    }

    /// Embeds and stores every chunk. Re-indexing a chunk id replaces its
    /// previous vector.
    pub fn index_chunks(&mut self, chunks: &[Chunk], embedder: &dyn Embedder) -> Result<IndexStats, IndexError> {
        if embedder.dim() != self.config.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.config.dim,
                found: embedder.dim(),
            });
        }
        if chunks.iter().any(|c| c.text.trim().is_empty()) {
            return Err(IndexError::EmptyText);
        }
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let vectors = embedder.embed_batch(&texts)?;
        for (chunk, vector) in chunks.iter().zip(vectors) {
            self.insert(ChunkRef::from(chunk), vector)?;
        }
        Ok(self.stats())
    }

    pub fn knn_query(&self, query: &str, k: usize, embedder: &dyn Embedder) -> Result<Vec<RetrievalHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let v = embedder.embed(query)?;
        self.knn_vector(&v, k)
    }

    /// The `min(k, len)` entries nearest to `query`.
    pub fn knn_vector(&self, query: &Vector, k: usize) -> Result<Vec<RetrievalHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if query.dim() != self.config.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.config.dim,
                found: query.dim(),
            });
        }
        let q = query.unit();
        let mut heap: BinaryHeap<Candidate<'_>> = BinaryHeap::with_capacity(k + 1);
        for entry in self.entries.values() {
            let cand = Candidate {
                distance: unit_distance(&q, &entry.unit),
                chunk_id: &entry.chunk_ref.chunk_id,
                entry,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .enumerate()
            .map(|(rank, c)| RetrievalHit {
                chunk_ref: c.entry.chunk_ref.clone(),
                distance: c.distance,
                rank,
            })
            .collect())
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (&ChunkRef, &Vector)> {
        self.entries.values().map(|e| (&e.chunk_ref, &e.vector))
    }
}

struct Candidate<'a> {
    distance: f64,
    chunk_id: &'a str,
    entry: &'a Entry,
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then_with(|| self.chunk_id.cmp(other.chunk_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{chunk_document, ingest_document, ChunkPolicy};
    use proptest::prelude::*;

    fn hashed() -> HashedBagOfWords {
        HashedBagOfWords::default()
    }

    fn chunk(id: &str, text: &str) -> Chunk {
        Chunk {
            chunk_id: id.into(),
            doc_id: "d".into(),
            text: text.into(),
            char_range: crate::corpus::CharRange::new(0, text.chars().count()),
            seq: 0,
        }
    }

    fn index_of(texts: &[&str]) -> VectorIndex {
        let mut idx = VectorIndex::new(IndexConfig::default(), hashed().id());
        let chunks: Vec<Chunk> = texts.iter().enumerate().map(|(i, t)| chunk(&format!("c{i:02}"), t)).collect();
        idx.index_chunks(&chunks, &hashed()).unwrap();
        idx
    }

    const TEXTS: [&str; 10] = [
        "Adults are 3–5 mm long, metallic blue-black or light brown.",
        "They have long antennae, large hind legs and jump when disturbed.",
        "Larvae are white, with very small dark spots on the back.",
        "They can reach 6 mm in length when mature",
        "Sow winter oilseed rape from mid-August.",
        "Drill into firm, moist seedbeds.",
        "Pollen beetles migrate into crops in spring.",
        "Monitor crops with yellow water traps.",
        "Thresholds depend on crop growth stage.",
        "Pyrethroid resistance is widespread.",
    ];

    #[test]
    fn empty_chunk_list_counts_zero() {
        let mut idx = VectorIndex::new(IndexConfig::default(), hashed().id());
        assert_eq!(idx.index_chunks(&[], &hashed()).unwrap(), IndexStats { count: 0, dim: 256 });
    }

    #[test]
    fn self_retrieval_at_rank_zero() {
        let idx = index_of(&TEXTS);
        assert_eq!(idx.len(), 10);
        for (i, text) in TEXTS.iter().enumerate() {
            let hits = idx.knn_query(text, 3, &hashed()).unwrap();
            assert_eq!(hits[0].chunk_ref.chunk_id, format!("c{i:02}"));
            assert_eq!(hits[0].distance, 0.0);
            assert_eq!(hits[0].rank, 0);
        }
    }

    #[test]
    fn reindexing_replaces() {
        let mut idx = index_of(&TEXTS[..2]);
        idx.index_chunks(&[chunk("c00", "completely different words")], &hashed()).unwrap();
        assert_eq!(idx.len(), 2);
        let hits = idx.knn_query("completely different words", 1, &hashed()).unwrap();
        assert_eq!(hits[0].chunk_ref.chunk_id, "c00");
        assert_eq!(hits[0].distance, 0.0);
    }

    #[test]
    fn k_is_truncated_to_index_size() {
        let idx = index_of(&TEXTS[..4]);
        let hits = idx.knn_query("beetle", 50, &hashed()).unwrap();
        assert_eq!(hits.len(), 4);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn errors() {
        let idx = VectorIndex::new(IndexConfig::default(), hashed().id());
        assert!(matches!(idx.knn_query("x", 1, &hashed()), Err(IndexError::EmptyIndex)));
        let idx = index_of(&TEXTS[..1]);
        assert!(matches!(idx.knn_query("x", 0, &hashed()), Err(IndexError::InvalidK)));
        let mut idx = VectorIndex::new(IndexConfig::default(), "x");
        assert!(matches!(
            idx.index_chunks(&[chunk("a", "b")], &HashedBagOfWords::new(8)),
            Err(IndexError::DimensionMismatch { expected: 256, found: 8 })
        ));
        assert!(matches!(Vector::new(vec![f32::NAN]), Err(IndexError::NonFinite)));
        assert!(matches!(Vector::new(vec![0.0, 0.0]), Err(IndexError::ZeroVector)));
    }

    #[test]
    fn ties_break_on_chunk_id() {
        let mut idx = VectorIndex::new(IndexConfig { dim: 2, ..IndexConfig::default() }, "t");
        for id in ["b", "c", "a"] {
            idx.insert(ChunkRef { chunk_id: id.into(), doc_id: "d".into() }, Vector::new(vec![1.0, 0.0]).unwrap())
                .unwrap();
        }
        let hits = idx.knn_vector(&Vector::new(vec![0.0, 1.0]).unwrap(), 3).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.chunk_ref.chunk_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn identification_heading_outranks_unrelated_text() {
        // the heading shares the token "identification" with the query
        let beetle = ingest_document(
            "## Identification\n\nAdults are 3–5 mm long, metallic blue-black or light brown. They have long antennae, large hind legs and jump when disturbed.".as_bytes(),
            "csfb.md",
        )
        .unwrap();
        let sowing = ingest_document(
            b"Sow winter oilseed rape from mid-August to early September into firm, moist seedbeds.",
            "sowing.txt",
        )
        .unwrap();
        let mut idx = VectorIndex::new(IndexConfig::default(), hashed().id());
        for doc in [&sowing, &beetle] {
            let chunks = chunk_document(doc, &ChunkPolicy::default()).unwrap();
            idx.index_chunks(&chunks, &hashed()).unwrap();
        }
        let hits = idx.knn_query("appearance, identification", 20, &hashed()).unwrap();
        assert_eq!(hits[0].chunk_ref.doc_id, beetle.doc_id);
        assert_eq!(hits[1].chunk_ref.doc_id, sowing.doc_id);

        // brute-force check of the two distances by direct dot products
        let e = hashed();
        let q = e.embed("appearance, identification").unwrap();
        let dot = |text: &str| -> f64 {
            let v = e.embed(text).unwrap();
            q.components().iter().zip(v.components()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
        };
        let d_beetle = 1.0 - dot(&beetle.body);
        let d_sowing = 1.0 - dot(&sowing.body);
        assert!(d_beetle < d_sowing);
        assert!((hits[0].distance - d_beetle).abs() < 1e-6);
        assert!((hits[1].distance - d_sowing).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn metric_sanity(a in prop::collection::vec(-10.0f32..10.0, 8), b in prop::collection::vec(-10.0f32..10.0, 8)) {
            prop_assume!(a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0));
            let (a, b) = (Vector::new(a).unwrap(), Vector::new(b).unwrap());
            prop_assert_eq!(cosine_distance(&a, &a), 0.0);
            prop_assert_eq!(cosine_distance(&a, &b), cosine_distance(&b, &a));
            let d = cosine_distance(&a, &b);
            prop_assert!((0.0..=2.0).contains(&d));
        }

        #[test]
        fn results_sorted_with_consecutive_ranks(
            vs in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..40),
            q in prop::collection::vec(-1.0f32..1.0, 4),
            k in 1usize..50,
        ) {
            prop_assume!(q.iter().any(|x| *x != 0.0));
            let mut idx = VectorIndex::new(IndexConfig { dim: 4, ..IndexConfig::default() }, "p");
            for (i, v) in vs.into_iter().enumerate() {
                if let Ok(v) = Vector::new(v) {
                    idx.insert(ChunkRef { chunk_id: format!("{i:03}"), doc_id: "d".into() }, v).unwrap();
                }
            }
            prop_assume!(!idx.is_empty());
            let hits = idx.knn_vector(&Vector::new(q).unwrap(), k).unwrap();
            prop_assert_eq!(hits.len(), k.min(idx.len()));
            for (i, h) in hits.iter().enumerate() {
                prop_assert_eq!(h.rank, i);
            }
            for w in hits.windows(2) {
                prop_assert!(w[0].distance <= w[1].distance);
            }
        }
    }
}
