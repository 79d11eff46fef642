//! Index file format: a JSON document followed by a trailer line
//! `sha256:<hex>` holding the digest of every byte before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChunkRef, IndexConfig, IndexError, Metric, Vector, VectorIndex};
use crate::fsutil::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
const TRAILER: &str = "sha256:";

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format_version: u32,
    dim: usize,
    metric: Metric,
    k_default: usize,
    embedder: String,
    entries: Vec<FileEntry>,
}

#[derive(Serialize, Deserialize)]
struct FileEntry {
    chunk_ref: ChunkRef,
    vector: Vector,
}

pub fn save_index(index: &VectorIndex, path: &Path) -> Result<(), IndexError> {
    let file = IndexFile {
        format_version: FORMAT_VERSION,
        dim: index.config.dim,
        metric: index.config.metric,
        k_default: index.config.k_default,
        embedder: index.embedder_id.clone(),
        entries: index
            .entries()
            .map(|(r, v)| FileEntry {
                chunk_ref: r.clone(),
                vector: v.clone(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&file).expect("index serialization");
    bytes.push(b'\n');
    let digest = hex::encode(Sha256::digest(&bytes));
    bytes.extend_from_slice(format!("{TRAILER}{digest}\n").as_bytes());
    write_atomic(path, &bytes).map_err(|source| IndexError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_index(path: &Path) -> Result<VectorIndex, IndexError> {
    let bytes = std::fs::read(path).map_err(|source| IndexError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let body = verify(&bytes)?;

    #[derive(Deserialize)]
    struct Header {
        format_version: u32,
    }
    let header: Header =
        serde_json::from_slice(body).map_err(|e| IndexError::CorruptIndex(format!("unreadable header: {e}")))?;
    if header.format_version > FORMAT_VERSION {
        return Err(IndexError::VersionMismatch {
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let file: IndexFile =
        serde_json::from_slice(body).map_err(|e| IndexError::CorruptIndex(e.to_string()))?;
    let mut index = VectorIndex::new(
        IndexConfig {
            dim: file.dim,
            metric: file.metric,
            k_default: file.k_default,
        },
        file.embedder,
    );
    for entry in file.entries {
        index
            .insert(entry.chunk_ref, entry.vector)
            .map_err(|e| IndexError::CorruptIndex(e.to_string()))?;
    }
    Ok(index)
}

fn verify(bytes: &[u8]) -> Result<&[u8], IndexError> {
    let content = bytes
        .strip_suffix(b"\n")
        .ok_or_else(|| IndexError::CorruptIndex("missing checksum trailer".into()))?;
    let split = content
        .iter()
        .rposition(|&b| b == b'\n')
        .ok_or_else(|| IndexError::CorruptIndex("missing checksum trailer".into()))?;
    let (body, trailer) = (&bytes[..=split], &content[split + 1..]);
    let expected = std::str::from_utf8(trailer)
        .ok()
        .and_then(|t| t.strip_prefix(TRAILER))
        .ok_or_else(|| IndexError::CorruptIndex("missing checksum trailer".into()))?;
    if hex::encode(Sha256::digest(body)) != expected {
        return Err(IndexError::CorruptIndex("checksum mismatch".into()));
    }
    Ok(body)
}
