use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use regex::Regex;
use serde_json::Value;

use super::{
    AttributeCandidate, CanonicalAttribute, DescriptorSpan, Entity, EntityRecord, OrderedMap, Stage, StageFailure,
};
use crate::corpus::{Chunk, Corpus, Sentence};
use crate::llm_gateway::{
    parse_json_object, parse_list, parse_string_groups, slots, Gateway, GatewayError, TemplateId,
};
use crate::vector_index::ChunkRef;

/// Placeholder sent when a chunk has no descriptor evidence, since empty
/// slots are rejected by the templates.
const NO_DESCRIPTIONS: &str = "(none)";

/// Runs `f` over `items` on a pool sized to the gateway's concurrency limit.
/// Results keep input order.
pub(crate) fn map_concurrent<T, R, F>(gateway: &Gateway, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if items.len() <= 1 || gateway.max_in_flight() == 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(gateway.max_in_flight()).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("falling back to sequential calls: {e}");
            items.iter().map(f).collect()
        }
    }
}

/// Splits per-item results into successes; parse failures become
/// [`StageFailure`]s, any other gateway error is returned.
fn triage<T>(
    stage: Stage,
    results: Vec<(String, Result<T, GatewayError>)>,
    failures: &mut Vec<StageFailure>,
) -> Result<Vec<(String, Option<T>)>, GatewayError> {
    let mut out = Vec::with_capacity(results.len());
    for (item, result) in results {
        match result {
            Ok(v) => out.push((item, Some(v))),
            Err(e) if e.is_parse() => {
                failures.push(StageFailure {
                    stage,
                    item: item.clone(),
                    error: e.to_string(),
                });
                out.push((item, None));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn fold(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn overlapping<'c>(corpus: &'c Corpus, chunk: &Chunk) -> impl Iterator<Item = &'c Sentence> {
    let range = chunk.char_range;
    corpus
        .sentences_of(&chunk.doc_id)
        .iter()
        .filter(move |s| s.char_range.start < range.end && range.start < s.char_range.end)
}

pub struct Stage1Output {
    pub spans: Vec<DescriptorSpan>,
    pub failures: Vec<StageFailure>,
}

/// One list question per chunk. Each phrase is attached to the first
/// sentence of the chunk that contains it; phrases found in no sentence are
/// kept and marked unverified. Repeats of the same phrase in the same
/// sentence (from overlapping chunks) are dropped.
pub fn stage1_extract_descriptors(
    chunks: &[&Chunk],
    corpus: &Corpus,
    gateway: &Gateway,
) -> Result<Stage1Output, GatewayError> {
    let answers = map_concurrent(gateway, chunks, |chunk| {
        (
            chunk.chunk_id.clone(),
            gateway.ask(TemplateId::Stage1Descriptors, &slots([("context", chunk.text.clone())]), parse_list),
        )
    });
    let mut failures = Vec::new();
    let answers = triage(Stage::Stage1, answers, &mut failures)?;

    let mut spans: Vec<DescriptorSpan> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (chunk, (_, phrases)) in chunks.iter().zip(answers) {
        for phrase in phrases.unwrap_or_default() {
            let needle = fold(&phrase);
            if needle.is_empty() {
                continue;
            }
            let sentence = overlapping(corpus, chunk).find(|s| fold(&s.text).contains(&needle));
            let anchor = sentence.map_or_else(|| chunk.chunk_id.clone(), |s| s.sent_id.clone());
            if !seen.insert((chunk.doc_id.clone(), anchor, needle)) {
                continue;
            }
            spans.push(DescriptorSpan {
                text: phrase,
                chunk_ref: ChunkRef::from(*chunk),
                evidence: sentence.map(|s| s.text.clone()).unwrap_or_default(),
                sent_id: sentence.map(|s| s.sent_id.clone()),
                unverified: sentence.is_none(),
            });
        }
    }
    Ok(Stage1Output { spans, failures })
}

pub struct Stage2Output {
    pub candidates: Vec<AttributeCandidate>,
    /// Attribute name per distinct phrase (lowercased), `None` if unmapped.
    pub mapping: Vec<(String, Option<String>)>,
    pub unmapped: Vec<String>,
    pub batches: usize,
    pub failures: Vec<StageFailure>,
}

/// Distinct descriptor phrases, compared case-insensitively, in first
/// occurrence order.
pub fn distinct_phrases(spans: &[DescriptorSpan]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    spans
        .iter()
        .filter(|s| seen.insert(fold(&s.text)))
        .map(|s| s.text.trim().to_string())
        .collect()
}

fn attribute_value(v: &Value) -> Option<String> {
    let name = match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.first().and_then(Value::as_str)?.to_string(),
        _ => return None,
    };
    let name = fold(&name);
    (!name.is_empty()).then_some(name)
}

/// Asks for the attribute type of every distinct phrase, `batch_size`
/// phrases per call, and groups the spans by the returned name.
pub fn stage2_derive_attributes(
    spans: &[DescriptorSpan],
    gateway: &Gateway,
    batch_size: usize,
) -> Result<Stage2Output, GatewayError> {
    let phrases = distinct_phrases(spans);
    let batches: Vec<&[String]> = phrases.chunks(batch_size.max(1)).collect();
    let answers = map_concurrent(gateway, &batches, |batch| {
        let listing = batch.iter().map(|p| format!("- {p}")).collect::<Vec<_>>().join("\n");
        (
            batch.join(" | "),
            gateway.ask(TemplateId::Stage2Attributes, &slots([("descriptors", listing)]), parse_json_object),
        )
    });
    let mut failures = Vec::new();
    let answers = triage(Stage::Stage2, answers, &mut failures)?;

    let mut mapping = Vec::with_capacity(phrases.len());
    let mut unmapped = Vec::new();
    for (batch, (_, answer)) in batches.iter().zip(answers) {
        let folded: HashMap<String, &Value> = answer
            .as_ref()
            .map(|obj| obj.iter().map(|(k, v)| (fold(k.trim_matches(|c: char| c == '-' || c.is_whitespace())), v)).collect())
            .unwrap_or_default();
        for phrase in batch.iter() {
            let attr = folded.get(&fold(phrase)).and_then(|v| attribute_value(v));
            if attr.is_none() {
                log::info!("descriptor {phrase:?} has no attribute in the answer");
                unmapped.push(phrase.clone());
            }
            mapping.push((fold(phrase), attr));
        }
    }

    let by_phrase: HashMap<&str, &str> = mapping
        .iter()
        .filter_map(|(p, a)| a.as_deref().map(|a| (p.as_str(), a)))
        .collect();
    let mut candidates: Vec<AttributeCandidate> = Vec::new();
    for span in spans {
        let Some(&name) = by_phrase.get(fold(&span.text).as_str()) else {
            continue;
        };
        match candidates.iter_mut().find(|c| c.name == name) {
            Some(c) => c.supporting_descriptors.push(span.clone()),
            None => candidates.push(AttributeCandidate {
                name: name.to_string(),
                supporting_descriptors: vec![span.clone()],
                frequency: 0,
            }),
        }
    }
    for c in &mut candidates {
        c.frequency = c.supporting_descriptors.len();
    }
    Ok(Stage2Output {
        candidates,
        mapping,
        unmapped,
        batches: batches.len(),
        failures,
    })
}

pub struct CanonicalOutput {
    pub attributes: Vec<CanonicalAttribute>,
    /// True when the grouping answer was unusable and names were only
    /// deduplicated exactly.
    pub fallback: bool,
    pub failures: Vec<StageFailure>,
}

/// Picks the group representative: highest frequency, then the
/// lexicographically smallest name, then the earliest candidate.
fn winner<'a>(group: &[(usize, &'a AttributeCandidate)]) -> &'a AttributeCandidate {
    group
        .iter()
        .min_by(|(ia, a), (ib, b)| {
            b.frequency
                .cmp(&a.frequency)
                .then_with(|| a.name.cmp(&b.name))
                .then_with(|| ia.cmp(ib))
        })
        .map(|(_, c)| *c)
        .expect("groups are never empty")
}

/// Groups synonymous candidate names from `groups` (indices into
/// `candidates`) into canonical attributes, ordered by each group's
/// earliest member.
pub fn resolve_groups(candidates: &[AttributeCandidate], groups: &[Vec<String>]) -> Vec<CanonicalAttribute> {
    let index: HashMap<String, usize> = candidates.iter().enumerate().map(|(i, c)| (fold(&c.name), i)).collect();
    let mut assigned = vec![false; candidates.len()];
    let mut resolved: Vec<Vec<usize>> = Vec::new();
    for group in groups {
        let mut members = Vec::new();
        for name in group {
            match index.get(&fold(name)) {
                Some(&i) if !assigned[i] => {
                    assigned[i] = true;
                    members.push(i);
                }
                Some(_) => {}
                None => log::info!("grouping names unknown attribute {name:?}"),
            }
        }
        if !members.is_empty() {
            resolved.push(members);
        }
    }
    for (i, done) in assigned.iter().enumerate() {
        if !done {
            resolved.push(vec![i]);
        }
    }
    resolved.sort_by_key(|members| members.iter().copied().min());

    resolved
        .into_iter()
        .map(|members| {
            let group: Vec<(usize, &AttributeCandidate)> = members.iter().map(|&i| (i, &candidates[i])).collect();
            let win = winner(&group);
            let mut merged_from = vec![win.name.clone()];
            merged_from.extend(group.iter().filter(|(_, c)| c.name != win.name).map(|(_, c)| c.name.clone()));
            CanonicalAttribute {
                name: win.name.to_lowercase(),
                merged_from,
            }
        })
        .collect()
}

/// One grouping question over all candidate names with their frequencies.
/// An unusable answer falls back to exact-name deduplication.
pub fn canonicalize_attributes(
    candidates: &[AttributeCandidate],
    gateway: &Gateway,
) -> Result<CanonicalOutput, GatewayError> {
    if candidates.is_empty() {
        return Ok(CanonicalOutput {
            attributes: Vec::new(),
            fallback: false,
            failures: Vec::new(),
        });
    }
    let listing = candidates
        .iter()
        .map(|c| format!("- {} ({})", c.name, c.frequency))
        .collect::<Vec<_>>()
        .join("\n");
    match gateway.ask(TemplateId::AttrDedup, &slots([("attributes", listing)]), parse_string_groups) {
        Ok(groups) => Ok(CanonicalOutput {
            attributes: resolve_groups(candidates, &groups),
            fallback: false,
            failures: Vec::new(),
        }),
        Err(e) if e.is_parse() => Ok(CanonicalOutput {
            attributes: resolve_groups(candidates, &[]),
            fallback: true,
            failures: vec![StageFailure {
                stage: Stage::Canonicalize,
                item: "attribute groups".into(),
                error: e.to_string(),
            }],
        }),
        Err(e) => Err(e),
    }
}

/// Case-insensitive whole-word pattern for an entity name.
pub fn mention_pattern(name: &str) -> Regex {
    let words: Vec<String> = name.split_whitespace().map(regex::escape).collect();
    let body = words.join(r"\s+");
    let lead = if name.trim_start().starts_with(|c: char| c.is_alphanumeric()) { r"\b" } else { "" };
    let tail = if name.trim_end().ends_with(|c: char| c.is_alphanumeric()) { r"\b" } else { "" };
    Regex::new(&format!("(?i){lead}{body}{tail}")).expect("escaped pattern")
}

pub struct Stage3Output {
    pub entities: Vec<Entity>,
    pub failures: Vec<StageFailure>,
}

/// One subject question per chunk, with that chunk's descriptor evidence as
/// extra context. Names are merged case-insensitively per document; every
/// sentence of the document that names the entity becomes a mention.
pub fn stage3_extract_entities(
    chunks: &[&Chunk],
    spans: &[DescriptorSpan],
    corpus: &Corpus,
    gateway: &Gateway,
) -> Result<Stage3Output, GatewayError> {
    let answers = map_concurrent(gateway, chunks, |chunk| {
        let mut evidence: Vec<&str> = Vec::new();
        for s in spans.iter().filter(|s| s.chunk_ref.chunk_id == chunk.chunk_id && !s.unverified) {
            if !evidence.contains(&s.evidence.as_str()) {
                evidence.push(&s.evidence);
            }
        }
        let descriptions = if evidence.is_empty() {
            NO_DESCRIPTIONS.to_string()
        } else {
            evidence.iter().map(|e| format!("- {e}")).collect::<Vec<_>>().join("\n")
        };
        (
            chunk.chunk_id.clone(),
            gateway.ask(
                TemplateId::Stage3Entities,
                &slots([("context", chunk.text.clone()), ("descriptions", descriptions)]),
                parse_list,
            ),
        )
    });
    let mut failures = Vec::new();
    let answers = triage(Stage::Stage3, answers, &mut failures)?;

    let mut entities: Vec<Entity> = Vec::new();
    for (chunk, (_, names)) in chunks.iter().zip(answers) {
        for name in names.unwrap_or_default() {
            let name = name.split_whitespace().collect::<Vec<_>>().join(" ");
            if name.is_empty()
                || entities
                    .iter()
                    .any(|e| e.doc_id == chunk.doc_id && e.name.to_lowercase() == name.to_lowercase())
            {
                continue;
            }
            let pattern = mention_pattern(&name);
            let mention_sentences: Vec<String> = corpus
                .sentences_of(&chunk.doc_id)
                .iter()
                .filter(|s| pattern.is_match(&s.text))
                .map(|s| s.sent_id.clone())
                .collect();
            if mention_sentences.is_empty() {
                log::warn!("entity {name:?} is never named in {}; dropped", chunk.doc_id);
                failures.push(StageFailure {
                    stage: Stage::Stage3,
                    item: format!("{}: {name}", chunk.doc_id),
                    error: "entity name does not occur in any sentence".into(),
                });
                continue;
            }
            entities.push(Entity {
                name,
                doc_id: chunk.doc_id.clone(),
                mention_sentences,
            });
        }
    }
    Ok(Stage3Output { entities, failures })
}

fn value_text(v: &Value) -> Option<String> {
    let text = match v {
        Value::String(s) => s.trim().to_string(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Array(items) => items
            .iter()
            .filter_map(value_text)
            .collect::<Vec<_>>()
            .join(", "),
        Value::Null | Value::Object(_) => return None,
    };
    (!text.is_empty()).then_some(text)
}

/// Which canonical attribute an answer key names: the canonical name
/// itself, or one of the names merged into it.
fn resolve_key<'a>(key: &str, canonical: &'a [CanonicalAttribute]) -> Option<&'a CanonicalAttribute> {
    let key = fold(key);
    canonical
        .iter()
        .find(|c| c.name == key)
        .or_else(|| canonical.iter().find(|c| c.merged_from.iter().any(|m| fold(m) == key)))
}

/// Asks for the entity's attribute values given its mention sentences.
/// Unknown keys are dropped; attributes without a value are left out. An
/// unusable answer yields a record with no attributes and a failure entry.
pub fn stage4_bind(
    entity: &Entity,
    canonical: &[CanonicalAttribute],
    sentences: &[&Sentence],
    gateway: &Gateway,
) -> Result<(EntityRecord, Option<StageFailure>), GatewayError> {
    let mut record = EntityRecord {
        entity: entity.name.clone(),
        doc_id: entity.doc_id.clone(),
        attributes: OrderedMap::new(),
        provenance: OrderedMap::new(),
    };
    if canonical.is_empty() || sentences.is_empty() {
        return Ok((record, None));
    }
    let names = canonical.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", ");
    let context = sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n");
    let answer = gateway.ask(
        TemplateId::Stage4Bind,
        &slots([("entity", entity.name.clone()), ("attributes", names), ("context", context)]),
        parse_json_object,
    );
    let object = match answer {
        Ok(o) => o,
        Err(e) if e.is_parse() => {
            let failure = StageFailure {
                stage: Stage::Stage4,
                item: format!("{}: {}", entity.doc_id, entity.name),
                error: e.to_string(),
            };
            return Ok((record, Some(failure)));
        }
        Err(e) => return Err(e),
    };

    let mut found: BTreeMap<usize, String> = BTreeMap::new();
    for (key, value) in &object {
        let Some(attr) = resolve_key(key, canonical) else {
            log::warn!("{} / {}: dropping unknown attribute {key:?}", entity.doc_id, entity.name);
            continue;
        };
        let pos = canonical.iter().position(|c| c.name == attr.name).expect("resolved from list");
        if let Some(text) = value_text(value) {
            found.entry(pos).or_insert(text);
        }
    }
    let submitted: Vec<String> = sentences.iter().map(|s| s.sent_id.clone()).collect();
    for (pos, value) in found {
        let name = canonical[pos].name.clone();
        record.provenance.insert(name.clone(), submitted.clone());
        record.attributes.insert(name, value);
    }
    Ok((record, None))
}
