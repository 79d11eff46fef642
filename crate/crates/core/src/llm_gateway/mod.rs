//! Chat-model access: prompt templates, pluggable backends (remote, replay,
//! scripted), answer parsers, and call accounting.

mod backend;
mod parse;
mod replay;
mod template;

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    BackendKind, Completion, CompletionBackend, CompletionParams, RecordingBackend, RemoteBackend, RemoteChatConfig,
    ReplayBackend, ScriptedBackend, Usage,
};
pub use parse::{parse_json_object, parse_list, parse_string_groups, parse_verdict, ParseError};
pub use replay::{CacheEntry, ReplayCache};
pub use template::{
    slots, PromptSet, PromptTemplate, RenderedPrompt, TemplateId, TemplateOverride, PROMPT_VERSION, SYSTEM_PREAMBLE,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("template {template} needs a value for slot {{{slot}}}")]
    MissingSlot { template: TemplateId, slot: String },
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("gateway timed out")]
    Timeout,
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("no recorded completion for {template_id} prompt {digest}")]
    CacheMiss { digest: String, template_id: TemplateId },
    #[error("remote error: {0}")]
    Remote(String),
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("replay cache I/O: {0}")]
    Io(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

impl GatewayError {
    pub fn is_parse(&self) -> bool {
        matches!(self, GatewayError::Parse(_))
    }
}

/// A model answer that could not be parsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub template_id: TemplateId,
    /// 1 for the first answer, 2 for the answer to the format reminder.
    pub attempt: u8,
    pub raw_text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    /// Backend calls made, including format retries.
    pub calls: usize,
    pub calls_by_template: BTreeMap<TemplateId, usize>,
    /// Re-asks after an unparseable first answer.
    pub format_retries: usize,
    /// Answers still unparseable after the re-ask.
    pub unrecovered: usize,
    pub parse_failures: Vec<ParseFailure>,
    pub usage: Usage,
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Limiter {
    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.max {
                n = self.freed.wait(n).unwrap();
            }
            *n += 1;
        }
        let out = f();
        *self.in_flight.lock().unwrap() -= 1;
        self.freed.notify_one();
        out
    }
}

/// Renders prompts, dispatches them to a backend with at most
/// `max_in_flight` concurrent calls, and parses answers with one
/// format-reminder retry.
pub struct Gateway {
    backend: Box<dyn CompletionBackend>,
    prompts: PromptSet,
    params: CompletionParams,
    limiter: Limiter,
    stats: Mutex<GatewayStats>,
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

impl Gateway {
    pub fn new(backend: impl CompletionBackend + 'static) -> Self {
        Self::with_parts(Box::new(backend), PromptSet::default(), CompletionParams::default(), DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_parts(
        backend: Box<dyn CompletionBackend>,
        prompts: PromptSet,
        params: CompletionParams,
        max_in_flight: usize,
    ) -> Self {
        Self {
            backend,
            prompts,
            params,
            limiter: Limiter {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                max: max_in_flight.max(1),
            },
            stats: Mutex::new(GatewayStats::default()),
        }
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.max
    }

    pub fn stats(&self) -> GatewayStats {
        self.stats.lock().unwrap().clone()
    }

    pub fn render(&self, id: TemplateId, slots: &BTreeMap<&str, String>) -> Result<RenderedPrompt, GatewayError> {
        self.prompts.render(id, slots)
    }

    /// One backend call, counted.
    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<Completion, GatewayError> {
        let result = self.limiter.run(|| self.backend.complete(prompt, &self.params));
        let mut stats = self.stats.lock().unwrap();
        stats.calls += 1;
        *stats.calls_by_template.entry(prompt.template_id).or_default() += 1;
        if let Ok(Completion { usage: Some(u), .. }) = &result {
            stats.usage.prompt_tokens += u.prompt_tokens;
            stats.usage.completion_tokens += u.completion_tokens;
        }
        result
    }

    /// Renders `id`, asks, and parses. An unparseable answer is re-asked
    /// once with a format reminder; a second failure is returned as
    /// [`GatewayError::Parse`]. Every failure is logged with its raw text.
    pub fn ask<T>(
        &self,
        id: TemplateId,
        slots: &BTreeMap<&str, String>,
        parse: impl Fn(&str) -> Result<T, ParseError>,
    ) -> Result<T, GatewayError> {
        let prompt = self.render(id, slots)?;
        let first = self.complete(&prompt)?;
        let err = match parse(&first.raw_text) {
            Ok(v) => return Ok(v),
            Err(e) => e,
        };
        self.note_failure(id, 1, &err);
        self.stats.lock().unwrap().format_retries += 1;

        let second = self.complete(&prompt.with_reminder())?;
        parse(&second.raw_text).map_err(|e| {
            self.note_failure(id, 2, &e);
            self.stats.lock().unwrap().unrecovered += 1;
            GatewayError::Parse(e)
        })
    }

    fn note_failure(&self, id: TemplateId, attempt: u8, err: &ParseError) {
        log::warn!("{id}: unparseable answer (attempt {attempt}): {:?}", err.raw_text());
        self.stats.lock().unwrap().parse_failures.push(ParseFailure {
            template_id: id,
            attempt,
            raw_text: err.raw_text().to_string(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn parse_retry_recovers() {
        let n = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&n);
        let gw = Gateway::new(ScriptedBackend::new(move |p| {
            if counter.fetch_add(1, Ordering::SeqCst) == 0 {
                "I think the words are nice.".into()
            } else {
                assert!(p.user.ends_with(TemplateId::Stage1Descriptors.format_reminder()));
                "[\"white\"]".into()
            }
        }));
        let out = gw
            .ask(TemplateId::Stage1Descriptors, &slots([("context", "Larvae are white.".into())]), parse_list)
            .unwrap();
        assert_eq!(out, vec!["white"]);
        let stats = gw.stats();
        assert_eq!(stats.calls, 2);
        assert_eq!(stats.format_retries, 1);
        assert_eq!(stats.unrecovered, 0);
        assert_eq!(stats.parse_failures.len(), 1);
        assert_eq!(stats.parse_failures[0].raw_text, "I think the words are nice.");
    }

    #[test]
    fn second_failure_surfaces_parse_error() {
        let gw = Gateway::new(ScriptedBackend::new(|_| "maybe".into()));
        let err = gw
            .ask(
                TemplateId::RelevanceJudge,
                &slots([("context", "x".into()), ("intent", "y".into())]),
                parse_verdict,
            )
            .unwrap_err();
        assert!(matches!(err, GatewayError::Parse(ParseError::UnparseableVerdict { .. })));
        assert!(err.is_parse());
        let stats = gw.stats();
        assert_eq!((stats.calls, stats.unrecovered, stats.parse_failures.len()), (2, 1, 2));
    }

    #[test]
    fn transport_errors_are_not_retried_for_format() {
        let gw = Gateway::new(ReplayBackend::new(ReplayCache::new()));
        let err = gw
            .ask(TemplateId::Stage1Descriptors, &slots([("context", "x".into())]), parse_list)
            .unwrap_err();
        assert!(matches!(err, GatewayError::CacheMiss { .. }));
        assert_eq!(gw.stats().calls, 1);
    }

    #[test]
    fn concurrency_is_bounded() {
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (c, p) = (Arc::clone(&current), Arc::clone(&peak));
        let backend = ScriptedBackend::new(move |_| {
            let now = c.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(5));
            c.fetch_sub(1, Ordering::SeqCst);
            "[]".into()
        });
        let gw = Gateway::with_parts(Box::new(backend), PromptSet::default(), CompletionParams::default(), 2);
        std::thread::scope(|s| {
            for i in 0..8 {
                let gw = &gw;
                s.spawn(move || {
                    gw.ask(TemplateId::Stage1Descriptors, &slots([("context", format!("t{i}"))]), parse_list)
                        .unwrap()
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(gw.stats().calls, 8);
    }
}
