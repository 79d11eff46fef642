//! Document ingestion, text normalization, chunking and sentence segmentation.
//!
//! All offsets exposed by this module ([`CharRange`]) count Unicode scalar
//! values, not bytes. [`Document::slice`] maps them back to the body text.

mod chunk;
mod normalize;
mod sentence;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use chunk::{chunk_document, ChunkPolicy};
pub use normalize::{normalize_text, strip_html};
pub use sentence::{split_sentences, ABBREVIATIONS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("{path}: not valid UTF-8 ({reason})")]
    Decode { path: String, reason: String },
    #[error("{path}: document is empty after normalization")]
    EmptyDocument { path: String },
    #[error("invalid chunk policy: {0}")]
    InvalidPolicy(String),
}

/// Half-open `[start, end)` range of character offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CharRange {
    pub start: usize,
    pub end: usize,
}

impl CharRange {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source_path: String,
    pub title: Option<String>,
    pub body: String,
    /// Hex SHA-256 of the raw input bytes.
    pub sha256: String,
}

impl Document {
    /// Returns the body text covered by `range`.
    ///
    /// Panics if the range lies outside the body.
    pub fn slice(&self, range: CharRange) -> &str {
        let offsets = byte_offsets(&self.body);
        &self.body[offsets[range.start]..offsets[range.end]]
    }

    pub fn char_len(&self) -> usize {
        self.body.chars().count()
    }
}

/// Byte offset of every char boundary, including the end of the string.
pub(crate) fn byte_offsets(text: &str) -> Vec<usize> {
    text.char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    pub char_range: CharRange,
    pub seq: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sent_id: String,
    pub doc_id: String,
    pub text: String,
    pub char_range: CharRange,
}

pub fn chunk_id(doc_id: &str, seq: usize) -> String {
    format!("{doc_id}#c{seq:04}")
}

pub fn sentence_id(doc_id: &str, index: usize) -> String {
    format!("{doc_id}#s{index:04}")
}

/// Decodes, normalizes and identifies one raw input file.
///
/// HTML is detected from the `.html` / `.htm` extension of `source_path`.
/// The document id combines a slug of the file stem with a digest of the
/// source path and the raw content, so it is stable for identical inputs.
pub fn ingest_document(raw: &[u8], source_path: &str) -> Result<Document, CorpusError> {
    let text = std::str::from_utf8(raw).map_err(|e| CorpusError::Decode {
        path: source_path.to_string(),
        reason: e.to_string(),
    })?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);

    let lower = source_path.to_ascii_lowercase();
    let is_html = lower.ends_with(".html") || lower.ends_with(".htm");
    let (title, body) = if is_html {
        let title = normalize::html_title(text);
        (title, normalize_text(&strip_html(text)))
    } else {
        let body = normalize_text(text);
        (markdown_title(&body), body)
    };
    if body.trim().is_empty() {
        return Err(CorpusError::EmptyDocument {
            path: source_path.to_string(),
        });
    }

    let sha256 = hex::encode(Sha256::digest(raw));
    let mut hasher = Sha256::new();
    hasher.update(source_path.as_bytes());
    hasher.update([0u8]);
    hasher.update(sha256.as_bytes());
    let digest = hex::encode(hasher.finalize());
    let doc_id = format!("{}-{}", slug(source_path), &digest[..8]);

    Ok(Document {
        doc_id,
        source_path: source_path.to_string(),
        title,
        body,
        sha256,
    })
}

fn markdown_title(body: &str) -> Option<String> {
    body.lines()
        .find_map(|line| line.strip_prefix("# "))
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
}

fn slug(source_path: &str) -> String {
    let file = source_path
        .rsplit(['/', '\\'])
        .next()
        .unwrap_or(source_path);
    let stem = match file.rfind('.') {
        Some(i) if i > 0 => &file[..i],
        _ => file,
    };
    let mut out = String::new();
    for c in stem.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_alphanumeric() {
            out.push(c);
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    let out = out.trim_matches('_').to_string();
    if out.is_empty() {
        "doc".to_string()
    } else {
        out
    }
}

/// Ingested documents together with their chunks and sentences.
///
/// Documents keep insertion order; chunks and sentences are derived once
/// with a fixed [`ChunkPolicy`].
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    chunks: BTreeMap<String, Vec<Chunk>>,
    sentences: BTreeMap<String, Vec<Sentence>>,
}

impl Corpus {
    pub fn build(documents: Vec<Document>, policy: &ChunkPolicy) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for doc in documents {
            corpus.chunks.insert(doc.doc_id.clone(), chunk_document(&doc, policy)?);
            corpus.sentences.insert(doc.doc_id.clone(), split_sentences(&doc));
            corpus.documents.push(doc);
        }
        Ok(corpus)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn doc_position(&self, doc_id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.doc_id == doc_id)
    }

    pub fn chunks_of(&self, doc_id: &str) -> &[Chunk] {
        self.chunks.get(doc_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn sentences_of(&self, doc_id: &str) -> &[Sentence] {
        self.sentences.get(doc_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All chunks in document order, then `seq` order.
    pub fn all_chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.documents
            .iter()
            .flat_map(move |d| self.chunks_of(&d.doc_id).iter())
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        let (doc_id, _) = chunk_id.rsplit_once("#c")?;
        self.chunks_of(doc_id).iter().find(|c| c.chunk_id == chunk_id)
    }

    pub fn sentence(&self, sent_id: &str) -> Option<&Sentence> {
        let (doc_id, _) = sent_id.rsplit_once("#s")?;
        self.sentences_of(doc_id).iter().find(|s| s.sent_id == sent_id)
    }
}
