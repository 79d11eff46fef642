use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{IndexError, Vector};
use crate::http::{self, HttpError, RetryPolicy};

pub const DEFAULT_HASHED_DIM: usize = 256;

/// Turns text into fixed-dimension vectors.
pub trait Embedder: Send + Sync {
    /// Stable identifier stored in index files, e.g. `hashed-bow-256`.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, IndexError>;

    fn embed(&self, text: &str) -> Result<Vector, IndexError> {
        let mut out = self.embed_batch(&[text])?;
        Ok(out.remove(0))
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Offline provider: token counts hashed into `dim` buckets, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagOfWords {
    dim: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self { dim: DEFAULT_HASHED_DIM }
    }
}

impl HashedBagOfWords {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }

    fn embed_one(&self, text: &str) -> Result<Vector, IndexError> {
        let mut counts = vec![0f32; self.dim];
        let mut any = false;
        for token in tokenize(text) {
            counts[self.bucket(&token)] += 1.0;
            any = true;
        }
        if !any {
            return Err(IndexError::EmptyText);
        }
        let norm = counts.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        Vector::new(counts.into_iter().map(|x| (f64::from(x) / norm) as f32).collect())
    }
}

impl Embedder for HashedBagOfWords {
    fn id(&self) -> String {
        format!("hashed-bow-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, IndexError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub dim: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    64
}

/// Embedding endpoint speaking `{input, model} -> {data: [{embedding}]}`.
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    /// Resolves the API key from the environment. Fails if the named
    /// variable is unset.
    pub fn new(config: RemoteEmbedderConfig, retry: RetryPolicy) -> Result<Self, IndexError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                IndexError::Provider(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        Ok(Self {
            client: http::client(retry.timeout),
            config,
            api_key,
            retry,
        })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vector>, IndexError> {
        let body = json!({ "input": texts, "model": self.config.model });
        let resp = http::post_json(&self.client, &self.config.endpoint, self.api_key.as_deref(), &body, &self.retry)
            .map_err(|e: HttpError| IndexError::Provider(e.to_string()))?;
        let data = resp
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| IndexError::Provider("response has no `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(IndexError::Provider(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|item| {
                let comps: Vec<f32> = item
                    .get("embedding")
                    .and_then(|e| e.as_array())
                    .ok_or_else(|| IndexError::Provider("item has no `embedding`".into()))?
                    .iter()
                    .map(|x| x.as_f64().map(|f| f as f32))
                    .collect::<Option<_>>()
                    .ok_or_else(|| IndexError::Provider("non-numeric embedding component".into()))?;
                if comps.len() != self.config.dim {
                    return Err(IndexError::DimensionMismatch {
                        expected: self.config.dim,
                        found: comps.len(),
                    });
                }
                Vector::new(comps)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote-{}-{}", self.config.model, self.config.dim)
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, IndexError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(IndexError::EmptyText);
        }
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.config.batch_size.max(1)) {
            out.extend(self.request(batch)?);
        }
        Ok(out)
    }
}
