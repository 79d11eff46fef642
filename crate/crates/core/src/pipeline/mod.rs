//! The four extraction stages over relevance-filtered chunks: descriptive
//! phrases, attribute types, entities, and entity/attribute binding.

mod ordered;
mod output;
mod stages;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, Corpus, Sentence};
use crate::ebr_filter::{ebr_filter, FilterError, ProbeRecord, RankedText, RelevanceOracle, DEFAULT_MAX_PROBES};
use crate::llm_gateway::{Gateway, GatewayError, ParseFailure, TemplateId, PROMPT_VERSION};
use crate::vector_index::{cosine_distance, ChunkRef, Embedder, IndexError, RetrievalHit, VectorIndex};

pub use ordered::OrderedMap;
pub use output::{document_output, write_outputs, DocumentEntity, DocumentOutput, OutputError, RUN_MANIFEST};
pub use stages::{
    canonicalize_attributes, distinct_phrases, mention_pattern, resolve_groups, stage1_extract_descriptors,
    stage2_derive_attributes, stage3_extract_entities, stage4_bind, CanonicalOutput, Stage1Output, Stage2Output,
    Stage3Output,
};

pub const DEFAULT_RETRIEVAL_QUERY: &str = "appearance, identification";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalScope {
    /// One attribute set for the whole run.
    #[default]
    Corpus,
    /// A separate attribute set per document.
    Document,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub retrieval_query: String,
    /// What the relevance oracle looks for. Derived from the retrieval
    /// query when absent.
    pub relevance_intent: Option<String>,
    pub top_k: usize,
    pub max_probes: usize,
    pub attribute_batch_size: usize,
    pub canonical_scope: CanonicalScope,
    /// Narrow each entity's mention sentences with a second relevance
    /// filter before binding.
    pub stage4_use_ebr: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            retrieval_query: DEFAULT_RETRIEVAL_QUERY.to_string(),
            relevance_intent: None,
            top_k: 20,
            max_probes: DEFAULT_MAX_PROBES,
            attribute_batch_size: 50,
            canonical_scope: CanonicalScope::Corpus,
            stage4_use_ebr: false,
        }
    }
}

impl PipelineConfig {
    pub fn intent(&self) -> String {
        self.relevance_intent
            .clone()
            .unwrap_or_else(|| format!("contains {} information", self.retrieval_query))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.retrieval_query.trim().is_empty() {
            return Err("retrieval_query must not be empty".into());
        }
        if self.top_k == 0 {
            return Err("top_k must be at least 1".into());
        }
        if self.max_probes == 0 {
            return Err("max_probes must be at least 1".into());
        }
        if self.attribute_batch_size == 0 {
            return Err("attribute_batch_size must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorSpan {
    pub text: String,
    pub chunk_ref: ChunkRef,
    /// The sentence containing the phrase; empty when unverified.
    pub evidence: String,
    pub sent_id: Option<String>,
    pub unverified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeCandidate {
    pub name: String,
    pub supporting_descriptors: Vec<DescriptorSpan>,
    pub frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalAttribute {
    pub name: String,
    /// Candidate names folded into this attribute, the winner first.
    pub merged_from: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub doc_id: String,
    pub mention_sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity: String,
    pub doc_id: String,
    pub attributes: OrderedMap<String>,
    pub provenance: OrderedMap<Vec<String>>,
}

/// Final attribute assigned to one descriptor phrase of one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorAssignment {
    pub doc_id: String,
    pub descriptor: String,
    pub attribute: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Retrieval,
    Filter,
    Stage1,
    Stage2,
    Canonicalize,
    Stage3,
    Stage4,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Retrieval => "retrieval",
            Stage::Filter => "filter",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Canonicalize => "canonicalize",
            Stage::Stage3 => "stage3",
            Stage::Stage4 => "stage4",
        })
    }
}

/// A non-fatal problem: the item was skipped or degraded and the run went on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub item: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub documents: usize,
    pub chunks_indexed: usize,
    pub hits_retrieved: usize,
    pub chunks_accepted: usize,
    pub filter_probes: usize,
    pub descriptors: usize,
    pub unverified_descriptors: usize,
    pub distinct_descriptors: usize,
    pub unmapped_descriptors: usize,
    pub stage2_batches: usize,
    pub attribute_candidates: usize,
    pub dedup_calls: usize,
    pub canonical_attributes: usize,
    pub entities: usize,
    pub stage4_calls: usize,
    pub records: usize,
    pub llm_calls: usize,
    pub calls_by_template: BTreeMap<TemplateId, usize>,
    pub format_retries: usize,
    pub unrecovered_parses: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_digest: String,
    pub backend: String,
    pub prompt_version: String,
    pub embedder_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub counters: RunCounters,
    /// True when attribute grouping fell back to exact-name deduplication.
    pub dedup_fallback: bool,
    pub failures: Vec<StageFailure>,
    pub parse_failures: Vec<ParseFailure>,
    pub probe_log: Vec<ProbeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub records: Vec<EntityRecord>,
    /// The run-wide attribute set; empty in per-document scope.
    pub canonical_attributes: Vec<CanonicalAttribute>,
    /// Per-document attribute sets, only in per-document scope.
    pub document_attributes: BTreeMap<String, Vec<CanonicalAttribute>>,
    pub descriptors: Vec<DescriptorSpan>,
    pub assignments: Vec<DescriptorAssignment>,
    pub entities: Vec<Entity>,
    pub metadata: RunMetadata,
}

impl ExtractionResult {
    /// Attribute set that applies to `doc_id`.
    pub fn schema_for(&self, doc_id: &str) -> &[CanonicalAttribute] {
        match self.document_attributes.get(doc_id) {
            Some(attrs) => attrs,
            None => &self.canonical_attributes,
        }
    }
}

#[derive(Debug, Error)]
pub enum AbortCause {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("the index is empty; ingest and index a corpus first")]
    EmptyIndex,
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("{stage} failed: {cause}")]
    Aborted {
        stage: Stage,
        cause: AbortCause,
        /// Counters and failures gathered before the abort.
        metadata: Box<RunMetadata>,
    },
}

impl PipelineError {
    pub fn metadata(&self) -> Option<&RunMetadata> {
        match self {
            PipelineError::Aborted { metadata, .. } => Some(metadata),
            _ => None,
        }
    }
}

/// Borrowed inputs of one run.
pub struct RunInputs<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a VectorIndex,
    pub embedder: &'a dyn Embedder,
    pub gateway: &'a Gateway,
    pub oracle: &'a mut dyn RelevanceOracle,
    pub config: &'a PipelineConfig,
    pub config_digest: &'a str,
}

struct Run<'a> {
    gateway: &'a Gateway,
    metadata: RunMetadata,
}

impl Run<'_> {
    fn sync_gateway_stats(&mut self) {
        let stats = self.gateway.stats();
        let c = &mut self.metadata.counters;
        c.llm_calls = stats.calls;
        c.calls_by_template = stats.calls_by_template;
        c.format_retries = stats.format_retries;
        c.unrecovered_parses = stats.unrecovered;
        let mut failures = stats.parse_failures;
        failures.sort_by(|a, b| (a.template_id, a.attempt, &a.raw_text).cmp(&(b.template_id, b.attempt, &b.raw_text)));
        self.metadata.parse_failures = failures;
    }

    fn abort(&mut self, stage: Stage, cause: impl Into<AbortCause>) -> PipelineError {
        self.sync_gateway_stats();
        self.metadata.failures.sort_by(|a, b| (a.stage, &a.item).cmp(&(b.stage, &b.item)));
        PipelineError::Aborted {
            stage,
            cause: cause.into(),
            metadata: Box::new(std::mem::take(&mut self.metadata)),
        }
    }
}

/// Retrieval, relevance filtering, then the four stages.
///
/// Accepted chunks are processed in document and sequence order, so
/// concurrent calls never change the output.
pub fn run_pipeline(inputs: RunInputs<'_>) -> Result<ExtractionResult, PipelineError> {
    let RunInputs {
        corpus,
        index,
        embedder,
        gateway,
        oracle,
        config,
        config_digest,
    } = inputs;
    config.validate().map_err(PipelineError::Config)?;
    if index.is_empty() || corpus.is_empty() {
        return Err(PipelineError::EmptyIndex);
    }
    let mut run = Run {
        gateway,
        metadata: RunMetadata {
            config_digest: config_digest.to_string(),
            backend: gateway.backend_kind().as_str().to_string(),
            prompt_version: PROMPT_VERSION.to_string(),
            embedder_id: index.embedder_id().to_string(),
            ..RunMetadata::default()
        },
    };
    run.metadata.counters.documents = corpus.documents().len();
    run.metadata.counters.chunks_indexed = index.len();

    let hits = match index.knn_query(&config.retrieval_query, config.top_k, embedder) {
        Ok(h) => h,
        Err(IndexError::EmptyIndex) => return Err(PipelineError::EmptyIndex),
        Err(e) => return Err(run.abort(Stage::Retrieval, e)),
    };
    run.metadata.counters.hits_retrieved = hits.len();
    let mut ranked = Vec::with_capacity(hits.len());
    for hit in hits {
        let Some(chunk) = corpus.chunk(&hit.chunk_ref.chunk_id) else {
            let msg = format!("index refers to unknown chunk {}", hit.chunk_ref.chunk_id);
            return Err(run.abort(Stage::Retrieval, IndexError::CorruptIndex(msg)));
        };
        ranked.push(RankedText {
            text: chunk.text.clone(),
            hit,
        });
    }

    let outcome = match ebr_filter(&ranked, oracle, config.max_probes) {
        Ok(o) => o,
        Err(FilterError::Oracle { source, probe_log }) => {
            run.metadata.counters.filter_probes = probe_log.len();
            run.metadata.probe_log = probe_log.clone();
            return Err(run.abort(Stage::Filter, FilterError::Oracle { source, probe_log }));
        }
        Err(e) => return Err(run.abort(Stage::Filter, e)),
    };
    run.metadata.counters.filter_probes = outcome.probes_used;
    run.metadata.probe_log = outcome.probe_log.clone();
    run.metadata.counters.chunks_accepted = outcome.accepted.len();

    let mut accepted: Vec<&Chunk> = outcome
        .accepted
        .iter()
        .filter_map(|r| corpus.chunk(&r.hit.chunk_ref.chunk_id))
        .collect();
    accepted.sort_by_key(|c| (corpus.doc_position(&c.doc_id), c.seq));

    // Stage 1
    let s1 = stages::stage1_extract_descriptors(&accepted, corpus, gateway)
        .map_err(|e| run.abort(Stage::Stage1, e))?;
    run.metadata.failures.extend(s1.failures);
    let spans = s1.spans;
    run.metadata.counters.descriptors = spans.len();
    run.metadata.counters.unverified_descriptors = spans.iter().filter(|s| s.unverified).count();
    run.metadata.counters.distinct_descriptors = distinct_phrases(&spans).len();

    // Stage 2 and canonicalization
    let s2 = if spans.is_empty() {
        None
    } else {
        Some(
            stages::stage2_derive_attributes(&spans, gateway, config.attribute_batch_size)
                .map_err(|e| run.abort(Stage::Stage2, e))?,
        )
    };
    let (candidates, mapping) = match s2 {
        Some(s2) => {
            run.metadata.failures.extend(s2.failures);
            run.metadata.counters.unmapped_descriptors = s2.unmapped.len();
            run.metadata.counters.stage2_batches = s2.batches;
            (s2.candidates, s2.mapping)
        }
        None => (Vec::new(), Vec::new()),
    };
    run.metadata.counters.attribute_candidates = candidates.len();

    let mut canonical_attributes = Vec::new();
    let mut document_attributes = BTreeMap::new();
    let scopes: Vec<(Option<&str>, Vec<AttributeCandidate>)> = match config.canonical_scope {
        CanonicalScope::Corpus => vec![(None, candidates.clone())],
        CanonicalScope::Document => corpus
            .documents()
            .iter()
            .map(|d| (Some(d.doc_id.as_str()), candidates_for_doc(&candidates, &d.doc_id)))
            .collect(),
    };
    for (doc, scoped) in scopes {
        if !scoped.is_empty() {
            run.metadata.counters.dedup_calls += 1;
        }
        let out = canonicalize_attributes(&scoped, gateway).map_err(|e| run.abort(Stage::Canonicalize, e))?;
        run.metadata.dedup_fallback |= out.fallback;
        run.metadata.failures.extend(out.failures);
        match doc {
            None => canonical_attributes = out.attributes,
            Some(doc) => {
                document_attributes.insert(doc.to_string(), out.attributes);
            }
        }
    }
    run.metadata.counters.canonical_attributes = if config.canonical_scope == CanonicalScope::Corpus {
        canonical_attributes.len()
    } else {
        document_attributes.values().map(Vec::len).sum()
    };

    // Stage 3
    let s3 = stages::stage3_extract_entities(&accepted, &spans, corpus, gateway)
        .map_err(|e| run.abort(Stage::Stage3, e))?;
    run.metadata.failures.extend(s3.failures);
    let entities = s3.entities;
    run.metadata.counters.entities = entities.len();

    // Stage 4
    let schema_of = |doc_id: &str| -> &[CanonicalAttribute] {
        match document_attributes.get(doc_id) {
            Some(a) => a,
            None => &canonical_attributes,
        }
    };
    let mut evidence: Vec<Vec<&Sentence>> = Vec::with_capacity(entities.len());
    for entity in &entities {
        let sentences: Vec<&Sentence> = entity
            .mention_sentences
            .iter()
            .filter_map(|id| corpus.sentence(id))
            .collect();
        let sentences = if config.stage4_use_ebr && !schema_of(&entity.doc_id).is_empty() {
            match narrow_mentions(entity, schema_of(&entity.doc_id), &sentences, embedder, oracle, config) {
                Ok((kept, log)) => {
                    run.metadata.counters.filter_probes += log.len();
                    run.metadata.probe_log.extend(log);
                    kept
                }
                Err(e) => return Err(run.abort(Stage::Stage4, e)),
            }
        } else {
            sentences
        };
        evidence.push(sentences);
    }
    let jobs: Vec<(&Entity, &[&Sentence])> = entities.iter().zip(evidence.iter().map(Vec::as_slice)).collect();
    run.metadata.counters.stage4_calls = jobs
        .iter()
        .filter(|(e, s)| !s.is_empty() && !schema_of(&e.doc_id).is_empty())
        .count();
    let bound = stages::map_concurrent(gateway, &jobs, |(entity, sentences)| {
        stage4_bind(entity, schema_of(&entity.doc_id), sentences, gateway)
    });
    let mut records = Vec::with_capacity(bound.len());
    for result in bound {
        match result {
            Ok((record, failure)) => {
                run.metadata.failures.extend(failure);
                records.push(record);
            }
            Err(e) => return Err(run.abort(Stage::Stage4, e)),
        }
    }
    run.metadata.counters.records = records.len();

    let assignments = assign_descriptors(&spans, &mapping, &canonical_attributes, &document_attributes);
    run.sync_gateway_stats();
    run.metadata.failures.sort_by(|a, b| (a.stage, &a.item).cmp(&(b.stage, &b.item)));
    Ok(ExtractionResult {
        records,
        canonical_attributes,
        document_attributes,
        descriptors: spans,
        assignments,
        entities,
        metadata: run.metadata,
    })
}

fn candidates_for_doc(candidates: &[AttributeCandidate], doc_id: &str) -> Vec<AttributeCandidate> {
    candidates
        .iter()
        .filter_map(|c| {
            let supporting: Vec<DescriptorSpan> = c
                .supporting_descriptors
                .iter()
                .filter(|s| s.chunk_ref.doc_id == doc_id)
                .cloned()
                .collect();
            (!supporting.is_empty()).then(|| AttributeCandidate {
                name: c.name.clone(),
                frequency: supporting.len(),
                supporting_descriptors: supporting,
            })
        })
        .collect()
}

fn assign_descriptors(
    spans: &[DescriptorSpan],
    mapping: &[(String, Option<String>)],
    corpus_set: &[CanonicalAttribute],
    per_doc: &BTreeMap<String, Vec<CanonicalAttribute>>,
) -> Vec<DescriptorAssignment> {
    let mut out: Vec<DescriptorAssignment> = Vec::new();
    for span in spans {
        let doc_id = &span.chunk_ref.doc_id;
        let key = span.text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if out
            .iter()
            .any(|a| &a.doc_id == doc_id && a.descriptor.to_lowercase() == key)
        {
            continue;
        }
        let candidate = mapping.iter().find(|(p, _)| *p == key).and_then(|(_, a)| a.as_deref());
        let schema = per_doc.get(doc_id).map(Vec::as_slice).unwrap_or(corpus_set);
        let attribute = candidate.and_then(|name| {
            schema
                .iter()
                .find(|c| c.merged_from.iter().any(|m| m == name))
                .map(|c| c.name.clone())
        });
        out.push(DescriptorAssignment {
            doc_id: doc_id.clone(),
            descriptor: span.text.trim().to_string(),
            attribute,
        });
    }
    out
}

/// Second relevance pass: ranks an entity's mention sentences against
/// "{entity} {attribute names}" and keeps the accepted ones in document
/// order.
fn narrow_mentions<'s>(
    entity: &Entity,
    schema: &[CanonicalAttribute],
    sentences: &[&'s Sentence],
    embedder: &dyn Embedder,
    oracle: &mut dyn RelevanceOracle,
    config: &PipelineConfig,
) -> Result<(Vec<&'s Sentence>, Vec<ProbeRecord>), FilterError> {
    if sentences.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let names = schema.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(" ");
    let query = match embedder.embed(&format!("{} {names}", entity.name)) {
        Ok(q) => q,
        Err(e) => {
            log::warn!("cannot embed the mention query for {:?}: {e}", entity.name);
            return Ok((sentences.to_vec(), Vec::new()));
        }
    };
    let mut scored: Vec<(f64, usize)> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d = embedder.embed(&s.text).map(|v| cosine_distance(&query, &v)).unwrap_or(1.0);
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let ranked: Vec<RankedText> = scored
        .iter()
        .enumerate()
        .map(|(rank, &(distance, i))| RankedText {
            hit: RetrievalHit {
                chunk_ref: ChunkRef {
                    chunk_id: sentences[i].sent_id.clone(),
                    doc_id: entity.doc_id.clone(),
                },
                distance,
                rank,
            },
            text: sentences[i].text.clone(),
        })
        .collect();
    let outcome = ebr_filter(&ranked, oracle, config.max_probes)?;
    let mut kept: Vec<usize> = scored[..outcome.boundary].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    Ok((kept.into_iter().map(|i| sentences[i]).collect(), outcome.probe_log))
}
