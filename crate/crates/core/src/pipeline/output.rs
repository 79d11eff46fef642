use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ExtractionResult, OrderedMap};
use crate::corpus::Corpus;
use crate::fsutil::write_atomic;

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentEntity {
    pub name: String,
    pub attributes: OrderedMap<String>,
    pub provenance: OrderedMap<Vec<String>>,
}

/// Contents of one `{doc_id}.json` file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentOutput {
    pub doc_id: String,
    pub source_path: String,
    pub config_digest: String,
    /// Attribute names records of this document may use, in key order.
    pub attributes: Vec<String>,
    pub entities: Vec<DocumentEntity>,
}

pub fn document_output(result: &ExtractionResult, doc_id: &str, source_path: &str) -> DocumentOutput {
    DocumentOutput {
        doc_id: doc_id.to_string(),
        source_path: source_path.to_string(),
        config_digest: result.metadata.config_digest.clone(),
        attributes: result.schema_for(doc_id).iter().map(|c| c.name.clone()).collect(),
        entities: result
            .records
            .iter()
            .filter(|r| r.doc_id == doc_id)
            .map(|r| DocumentEntity {
                name: r.entity.clone(),
                attributes: r.attributes.clone(),
                provenance: r.provenance.clone(),
            })
            .collect(),
    }
}

pub(crate) fn to_pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("output serialization");
    bytes.push(b'\n');
    bytes
}

/// Writes `{doc_id}.json` for every document and the run manifest. Returns
/// the paths written, manifest last.
pub fn write_outputs(result: &ExtractionResult, corpus: &Corpus, dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| OutputError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    for doc in corpus.documents() {
        let path = dir.join(format!("{}.json", doc.doc_id));
        let out = document_output(result, &doc.doc_id, &doc.source_path);
        write_atomic(&path, &to_pretty_json(&out)).map_err(io(&path))?;
        written.push(path);
    }
    let path = dir.join(RUN_MANIFEST);
    write_atomic(&path, &to_pretty_json(&result.metadata)).map_err(io(&path))?;
    written.push(path);
    Ok(written)
}
