use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use finder_core::corpus::ChunkPolicy;
use finder_core::llm_gateway::{CompletionParams, TemplateOverride, DEFAULT_MAX_IN_FLIGHT};
use finder_core::pipeline::PipelineConfig;
use finder_core::vector_index::{RemoteEmbedderConfig, DEFAULT_HASHED_DIM};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleChoice {
    #[default]
    LlmJudge,
    InteractivePrompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Remote,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hashed {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Remote(RemoteEmbedderConfig),
}

fn default_dim() -> usize {
    DEFAULT_HASHED_DIM
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashed { dim: DEFAULT_HASHED_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: BackendChoice,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key. This is the
    /// only place the configuration reads the environment.
    pub api_key_env: Option<String>,
    pub replay_cache: PathBuf,
    pub max_in_flight: usize,
    pub completion: CompletionParams,
    pub prompt_overrides: BTreeMap<String, TemplateOverride>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: BackendChoice::Remote,
            endpoint: None,
            model: None,
            api_key_env: Some("OPENAI_API_KEY".into()),
            replay_cache: PathBuf::from("replay.jsonl"),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            completion: CompletionParams::default(),
            prompt_overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_paths: Vec<PathBuf>,
    pub chunk_policy: ChunkPolicy,
    /// Holds the ingested corpus and the index between commands.
    pub workspace_dir: PathBuf,
    pub output_dir: PathBuf,
    pub embedder: EmbedderConfig,
    pub pipeline: PipelineConfig,
    pub oracle: OracleChoice,
    pub gateway: GatewayConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_paths: vec![PathBuf::from("corpus")],
            chunk_policy: ChunkPolicy::default(),
            workspace_dir: PathBuf::from("workspace"),
            output_dir: PathBuf::from("output"),
            embedder: EmbedderConfig::default(),
            pipeline: PipelineConfig::default(),
            oracle: OracleChoice::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

/// A validated configuration with relative paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub digest: String,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.chunk_policy.validate().or_else(|e| bad(e.to_string()))?;
        self.pipeline.validate().or_else(bad)?;
        if self.gateway.max_in_flight == 0 {
            return bad("gateway.max_in_flight must be at least 1".into());
        }
        match &self.embedder {
            EmbedderConfig::Hashed { dim } if *dim == 0 => return bad("embedder.dim must be at least 1".into()),
            EmbedderConfig::Remote(r) if r.dim == 0 || r.batch_size == 0 => {
                return bad("embedder.dim and embedder.batch_size must be at least 1".into())
            }
            _ => {}
        }
        finder_core::llm_gateway::PromptSet::with_overrides(&self.gateway.prompt_overrides)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the configuration as JSON, leaving out where artifacts
    /// live and which backend answers (so recorded and replayed runs of the
    /// same configuration share a digest).
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialization");
        let obj = value.as_object_mut().expect("config is an object");
        obj.remove("output_dir");
        obj.remove("workspace_dir");
        if let Some(gw) = obj.get_mut("gateway").and_then(|g| g.as_object_mut()) {
            gw.remove("backend");
            gw.remove("replay_cache");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpus_paths.iter_mut().for_each(join);
        join(&mut self.workspace_dir);
        join(&mut self.output_dir);
        join(&mut self.gateway.replay_cache);
    }
}

/// Reads `path` (or the defaults when `None`), validates, computes the
/// digest and resolves relative paths against the file's directory.
pub fn load_config(path: Option<&Path>) -> Result<LoadedConfig, CliError> {
    let (mut config, base) = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let config: RunConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (config, base)
        }
        None => (RunConfig::default(), PathBuf::new()),
    };
    config.validate()?;
    let digest = config.digest();
    config.resolve(&base);
    Ok(LoadedConfig { config, digest })
}
