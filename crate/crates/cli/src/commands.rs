use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use finder_core::corpus::{ingest_document, ChunkPolicy, Corpus, Document};
use finder_core::ebr_filter::{InteractiveOracle, LlmJudgeOracle, RelevanceOracle};
use finder_core::evaluation::{self, EvalReport};
use finder_core::fsutil::write_atomic;
use finder_core::llm_gateway::{
    BackendKind, CompletionBackend, Gateway, PromptSet, RecordingBackend, RemoteBackend, RemoteChatConfig,
    ReplayBackend, ReplayCache,
};
use finder_core::pipeline::{run_pipeline, write_outputs, PipelineError, RunInputs};
use finder_core::vector_index::{
    load_index, save_index, Embedder, HashedBagOfWords, IndexConfig, IndexError, IndexStats, RemoteEmbedder,
    VectorIndex,
};

use crate::config::{BackendChoice, EmbedderConfig, LoadedConfig, OracleChoice, RunConfig};
use crate::CliError;

pub const CORPUS_FILE: &str = "corpus.json";
pub const INDEX_FILE: &str = "index.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const FAILURE_FILE: &str = "failure.json";
pub const REPORT_FILE: &str = "eval_report.json";

const TEXT_EXTENSIONS: &[&str] = &["txt", "md", "markdown", "html", "htm"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialization");
    bytes.push(b'\n');
    bytes
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_atomic(path, &to_json(value)).map_err(io_err(path))
}

/// The ingested corpus as stored in the workspace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config_digest: String,
    pub chunk_policy: ChunkPolicy,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub documents: usize,
    pub added: usize,
    pub updated: usize,
    pub unchanged: usize,
    pub removed: usize,
    /// Files that could not be ingested, with the reason.
    pub failed: Vec<(String, String)>,
}

/// Files under `root` with a text extension, sorted, each paired with its
/// path relative to `root` (or its file name when `root` is a file).
fn collect_files(root: &Path) -> Result<Vec<(PathBuf, String)>, CliError> {
    let rel = |p: &Path, base: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    };
    if root.is_file() {
        let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(root.to_path_buf(), name)]);
    }
    if !root.is_dir() {
        return Err(CliError::Input(format!("{} does not exist", root.display())));
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            let hidden = path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
            if hidden {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .is_some_and(|e| TEXT_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str()))
            {
                let r = rel(&path, root);
                out.push((path, r));
            } else {
                log::info!("skipping {} (not a text file)", path.display());
            }
        }
    }
    out.sort_by(|a, b| a.1.cmp(&b.1));
    Ok(out)
}

fn corpus_path(cfg: &RunConfig) -> PathBuf {
    cfg.workspace_dir.join(CORPUS_FILE)
}

fn index_path(cfg: &RunConfig) -> PathBuf {
    cfg.workspace_dir.join(INDEX_FILE)
}

pub fn load_manifest(cfg: &RunConfig) -> Result<Option<CorpusManifest>, CliError> {
    let path = corpus_path(cfg);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Ingests every text file under `paths` (the configured corpus paths when
/// empty). Unreadable files are reported and skipped; re-ingesting keeps
/// documents whose bytes did not change.
pub fn ingest(loaded: &LoadedConfig, paths: &[PathBuf]) -> Result<IngestSummary, CliError> {
    let cfg = &loaded.config;
    let roots = if paths.is_empty() { &cfg.corpus_paths[..] } else { paths };
    let previous: BTreeMap<String, Document> = load_manifest(cfg)?
        .map(|m| m.documents.into_iter().map(|d| (d.source_path.clone(), d)).collect())
        .unwrap_or_default();

    let mut summary = IngestSummary::default();
    let mut documents = Vec::new();
    let mut seen = BTreeSet::new();
    for root in roots {
        for (path, source_path) in collect_files(root)? {
            if !seen.insert(source_path.clone()) {
                log::warn!("{source_path} appears twice; keeping the first");
                continue;
            }
            let doc = std::fs::read(&path)
                .map_err(|e| e.to_string())
                .and_then(|raw| ingest_document(&raw, &source_path).map_err(|e| e.to_string()));
            match doc {
                Ok(doc) => {
                    match previous.get(&source_path) {
                        Some(old) if old.sha256 == doc.sha256 => summary.unchanged += 1,
                        Some(_) => summary.updated += 1,
                        None => summary.added += 1,
                    }
                    documents.push(doc);
                }
                Err(reason) => {
                    log::warn!("skipping {}: {reason}", path.display());
                    summary.failed.push((source_path, reason));
                }
            }
        }
    }
    if documents.is_empty() {
        return Err(CliError::EmptyCorpus);
    }
    summary.removed = previous.keys().filter(|k| !seen.contains(*k)).count();
    summary.documents = documents.len();
    write_json(
        &corpus_path(cfg),
        &CorpusManifest {
            config_digest: loaded.digest.clone(),
            chunk_policy: cfg.chunk_policy,
            documents,
        },
    )?;
    Ok(summary)
}

pub fn make_embedder(cfg: &RunConfig) -> Result<Box<dyn Embedder>, CliError> {
    Ok(match &cfg.embedder {
        EmbedderConfig::Hashed { dim } => Box::new(HashedBagOfWords::new(*dim)),
        EmbedderConfig::Remote(remote) => Box::new(
            RemoteEmbedder::new(remote.clone(), cfg.gateway.completion.retry_policy())
                .map_err(|e| CliError::Config(e.to_string()))?,
        ),
    })
}

/// Loads the stored corpus, ingesting the configured paths first if the
/// workspace has none.
pub fn load_corpus(loaded: &LoadedConfig) -> Result<Corpus, CliError> {
    let manifest = match load_manifest(&loaded.config)? {
        Some(m) => m,
        None => {
            ingest(loaded, &[])?;
            load_manifest(&loaded.config)?.ok_or(CliError::EmptyCorpus)?
        }
    };
    if manifest.documents.is_empty() {
        return Err(CliError::EmptyCorpus);
    }
    Ok(Corpus::build(manifest.documents, &loaded.config.chunk_policy)?)
}

fn build_index(corpus: &Corpus, embedder: &dyn Embedder, cfg: &RunConfig) -> Result<VectorIndex, CliError> {
    let config = IndexConfig {
        dim: embedder.dim(),
        k_default: cfg.pipeline.top_k,
        ..IndexConfig::default()
    };
    let mut index = VectorIndex::new(config, embedder.id());
    let chunks: Vec<_> = corpus.all_chunks().cloned().collect();
    if chunks.is_empty() {
        return Err(CliError::Index(IndexError::EmptyIndex));
    }
    index.index_chunks(&chunks, embedder)?;
    Ok(index)
}

/// Embeds every chunk of the stored corpus and saves the index.
pub fn index(loaded: &LoadedConfig) -> Result<IndexStats, CliError> {
    let corpus = load_corpus(loaded)?;
    let embedder = make_embedder(&loaded.config)?;
    let index = build_index(&corpus, embedder.as_ref(), &loaded.config)?;
    let path = index_path(&loaded.config);
    std::fs::create_dir_all(&loaded.config.workspace_dir).map_err(io_err(&loaded.config.workspace_dir))?;
    save_index(&index, &path)?;
    Ok(index.stats())
}

/// The saved index if it was built by the same embedder over exactly the
/// current chunks; otherwise a fresh one, which is saved.
fn current_index(loaded: &LoadedConfig, corpus: &Corpus, embedder: &dyn Embedder) -> Result<VectorIndex, CliError> {
    let path = index_path(&loaded.config);
    if path.exists() {
        match load_index(&path) {
            Ok(index)
                if index.embedder_id() == embedder.id()
                    && index.len() == corpus.all_chunks().count()
                    && corpus.all_chunks().all(|c| index.contains(&c.chunk_id)) =>
            {
                return Ok(index);
            }
            Ok(_) => log::info!("index at {} is stale; rebuilding", path.display()),
            Err(e) => log::warn!("cannot use index at {}: {e}; rebuilding", path.display()),
        }
    }
    let index = build_index(corpus, embedder, &loaded.config)?;
    std::fs::create_dir_all(&loaded.config.workspace_dir).map_err(io_err(&loaded.config.workspace_dir))?;
    save_index(&index, &path)?;
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Whatever `gateway.backend` says.
    Configured,
    /// Remote backend, every completion saved to the replay cache.
    Record,
    /// Replay cache only.
    Replay,
}

/// Where the relevance oracle talks to an operator.
pub enum OracleIo {
    Terminal,
    Custom(Box<dyn std::io::BufRead>, Box<dyn Write>),
}

pub struct ExtractOptions {
    pub mode: Mode,
    /// Overrides the replay cache location for `Record` and `Replay`.
    pub cache_path: Option<PathBuf>,
    /// Used instead of the configured backend, e.g. a scripted one.
    pub backend: Option<Box<dyn CompletionBackend>>,
    pub oracle_io: OracleIo,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Configured,
            cache_path: None,
            backend: None,
            oracle_io: OracleIo::Terminal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExtractSummary {
    pub documents: usize,
    pub entities: usize,
    pub attributes: usize,
    pub llm_calls: usize,
    pub failures: usize,
    pub written: Vec<PathBuf>,
}

#[derive(Serialize)]
struct FailureReport<'a> {
    config_digest: &'a str,
    exit_code: i32,
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metadata: Option<&'a finder_core::pipeline::RunMetadata>,
}

fn remote_backend(cfg: &RunConfig) -> Result<RemoteBackend, CliError> {
    let gw = &cfg.gateway;
    let (Some(endpoint), Some(model)) = (&gw.endpoint, &gw.model) else {
        return Err(CliError::Config("the remote backend needs gateway.endpoint and gateway.model".into()));
    };
    let remote = RemoteChatConfig {
        endpoint: endpoint.clone(),
        model: model.clone(),
        api_key_env: gw.api_key_env.clone(),
    };
    RemoteBackend::new(remote, &gw.completion).map_err(|e| CliError::Config(e.to_string()))
}

/// Runs the pipeline and writes per-document JSON, the run manifest and a
/// predictions file. A fatal error leaves `failure.json` in the output
/// directory.
pub fn extract(loaded: &LoadedConfig, options: ExtractOptions) -> Result<ExtractSummary, CliError> {
    let result = run_extract(loaded, options);
    if let Err(e) = &result {
        let stage = match e {
            CliError::Pipeline(PipelineError::Aborted { stage, .. }) => Some(stage.to_string()),
            _ => None,
        };
        let metadata = match e {
            CliError::Pipeline(p) => p.metadata(),
            _ => None,
        };
        let report = FailureReport {
            config_digest: &loaded.digest,
            exit_code: e.exit_code(),
            error: e.to_string(),
            stage,
            metadata,
        };
        if let Err(write_err) = write_json(&loaded.config.output_dir.join(FAILURE_FILE), &report) {
            log::error!("could not write the failure report: {write_err}");
        }
    }
    result
}

fn run_extract(loaded: &LoadedConfig, options: ExtractOptions) -> Result<ExtractSummary, CliError> {
    let cfg = &loaded.config;
    let cache_path = options.cache_path.clone().unwrap_or_else(|| cfg.gateway.replay_cache.clone());
    let mode = match (options.mode, cfg.gateway.backend) {
        (Mode::Configured, BackendChoice::Replay) => Mode::Replay,
        (mode, _) => mode,
    };

    // Credentials and caches are checked before any other work.
    let mut recorder: Option<Arc<RecordingBackend<Box<dyn CompletionBackend>>>> = None;
    let backend: Box<dyn CompletionBackend> = match (options.backend, mode) {
        (Some(b), Mode::Record) => {
            let rec = Arc::new(RecordingBackend::new(b));
            recorder = Some(Arc::clone(&rec));
            Box::new(rec)
        }
        (Some(b), _) => b,
        (None, Mode::Replay) => Box::new(ReplayBackend::new(ReplayCache::load(&cache_path)?)),
        (None, Mode::Record) => {
            let rec = Arc::new(RecordingBackend::new(Box::new(remote_backend(cfg)?) as Box<dyn CompletionBackend>));
            recorder = Some(Arc::clone(&rec));
            Box::new(rec)
        }
        (None, Mode::Configured) => Box::new(remote_backend(cfg)?),
    };
    let prompts = PromptSet::with_overrides(&cfg.gateway.prompt_overrides)?;
    let gateway = Gateway::with_parts(backend, prompts, cfg.gateway.completion, cfg.gateway.max_in_flight);

    let corpus = load_corpus(loaded)?;
    let embedder = make_embedder(cfg)?;
    let index = current_index(loaded, &corpus, embedder.as_ref())?;

    let intent = cfg.pipeline.intent();
    let mut oracle: Box<dyn RelevanceOracle + '_> = match cfg.oracle {
        OracleChoice::LlmJudge => Box::new(LlmJudgeOracle::new(&gateway, intent)),
        OracleChoice::InteractivePrompt => match options.oracle_io {
            OracleIo::Terminal => Box::new(InteractiveOracle::new(
                BufReader::new(std::io::stdin()),
                std::io::stderr(),
                intent,
            )),
            OracleIo::Custom(input, output) => Box::new(InteractiveOracle::new(input, output, intent)),
        },
    };

    let remote = gateway.backend_kind() == BackendKind::Remote;
    let started_at = remote.then(now);
    let outcome = run_pipeline(RunInputs {
        corpus: &corpus,
        index: &index,
        embedder: embedder.as_ref(),
        gateway: &gateway,
        oracle: oracle.as_mut(),
        config: &cfg.pipeline,
        config_digest: &loaded.digest,
    });
    if let Some(rec) = &recorder {
        save_recording(rec.cache(), &cache_path)?;
    }
    let mut result = outcome?;
    if remote {
        result.metadata.started_at = started_at;
        result.metadata.finished_at = Some(now());
    }

    let mut written = write_outputs(&result, &corpus, &cfg.output_dir)?;
    let predictions_path = cfg.output_dir.join(PREDICTIONS_FILE);
    write_json(&predictions_path, &evaluation::predictions_json(&result))?;
    written.push(predictions_path);
    let _ = std::fs::remove_file(cfg.output_dir.join(FAILURE_FILE));

    Ok(ExtractSummary {
        documents: corpus.documents().len(),
        entities: result.records.len(),
        attributes: result.records.iter().map(|r| r.attributes.len()).sum(),
        llm_calls: result.metadata.counters.llm_calls,
        failures: result.metadata.failures.len(),
        written,
    })
}

/// Adds newly recorded completions to whatever the cache file already holds.
fn save_recording(recorded: &ReplayCache, path: &Path) -> Result<(), CliError> {
    let merged = if path.exists() { ReplayCache::load(path)? } else { ReplayCache::new() };
    for entry in recorded.entries() {
        merged.insert(entry);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    merged.save(path)?;
    Ok(())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Scores a predictions file against a gold file and writes the report.
pub fn eval(predictions: &Path, gold: &Path, report_path: &Path) -> Result<EvalReport, CliError> {
    let gold = evaluation::load_gold(gold)?;
    let predictions = evaluation::load_predictions(predictions)?;
    let report = evaluation::evaluate(&gold, &predictions)?;
    if let Some(dir) = report_path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    evaluation::export_report(&report, report_path)?;
    Ok(report)
}
