use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::template::TemplateId;
use super::GatewayError;
use crate::fsutil::write_atomic;

/// One line of a replay cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub digest: String,
    pub template_id: TemplateId,
    pub raw_text: String,
}

/// Content-addressed store of recorded completions, keyed by
/// [`RenderedPrompt::digest`](super::RenderedPrompt::digest).
///
/// Reads and writes may come from several threads; the file is always
/// written sorted by digest so recording the same session twice yields the
/// same bytes.
#[derive(Debug, Default)]
pub struct ReplayCache {
    entries: RwLock<BTreeMap<String, CacheEntry>>,
}

impl Clone for ReplayCache {
    fn clone(&self) -> Self {
        Self {
            entries: RwLock::new(self.entries.read().unwrap().clone()),
        }
    }
}

impl ReplayCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<String> {
        self.entries.read().unwrap().get(digest).map(|e| e.raw_text.clone())
    }

    pub fn insert(&self, entry: CacheEntry) {
        self.entries.write().unwrap().insert(entry.digest.clone(), entry);
    }

    pub fn entries(&self) -> Vec<CacheEntry> {
        self.entries.read().unwrap().values().cloned().collect()
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let io_err = |e: std::io::Error| GatewayError::Io(format!("{}: {e}", path.display()));
        let file = std::fs::File::open(path).map_err(io_err)?;
        let cache = ReplayCache::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheEntry = serde_json::from_str(&line).map_err(|e| {
                GatewayError::Io(format!("{}:{}: malformed cache entry: {e}", path.display(), n + 1))
            })?;
            cache.insert(entry);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        let mut out = String::new();
        for entry in self.entries.read().unwrap().values() {
            out.push_str(&serde_json::to_string(entry).expect("cache entry serialization"));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes()).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))
    }
}
