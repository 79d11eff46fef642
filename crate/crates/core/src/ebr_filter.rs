//! Trims a distance-ranked hit list to its relevant prefix with a
//! median-probe binary search against a relevance oracle.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_gateway::{parse_verdict, slots, Gateway, GatewayError, TemplateId};
use crate::vector_index::RetrievalHit;

pub const DEFAULT_MAX_PROBES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    LlmJudge,
    InteractivePrompt,
    Scripted,
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleKind::LlmJudge => "llm_judge",
            OracleKind::InteractivePrompt => "interactive_prompt",
            OracleKind::Scripted => "scripted",
        })
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("operator prompt: {0}")]
    Io(String),
}

/// A retrieval hit together with the chunk text the oracle will read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedText {
    pub hit: RetrievalHit,
    pub text: String,
}

pub trait RelevanceOracle {
    fn kind(&self) -> OracleKind;
    fn judge(&mut self, probe: &RankedText) -> Result<bool, OracleError>;
}

/// Oracle backed by a plain function, used in tests and fixtures.
pub struct ScriptedOracle<F> {
    verdict: F,
}

impl<F: FnMut(&RankedText) -> bool> ScriptedOracle<F> {
    pub fn new(verdict: F) -> Self {
        Self { verdict }
    }
}

impl<F: FnMut(&RankedText) -> bool> RelevanceOracle for ScriptedOracle<F> {
    fn kind(&self) -> OracleKind {
        OracleKind::Scripted
    }

    fn judge(&mut self, probe: &RankedText) -> Result<bool, OracleError> {
        Ok((self.verdict)(probe))
    }
}

/// Renders the relevance-judgment prompt and reads a YES/NO verdict.
pub fn llm_judge_oracle(hit_text: &str, query_intent: &str, gateway: &Gateway) -> Result<bool, GatewayError> {
    gateway.ask(
        TemplateId::RelevanceJudge,
        &slots([("intent", query_intent.to_string()), ("context", hit_text.to_string())]),
        parse_verdict,
    )
}

pub struct LlmJudgeOracle<'g> {
    gateway: &'g Gateway,
    intent: String,
}

impl<'g> LlmJudgeOracle<'g> {
    pub fn new(gateway: &'g Gateway, intent: impl Into<String>) -> Self {
        Self {
            gateway,
            intent: intent.into(),
        }
    }
}

impl RelevanceOracle for LlmJudgeOracle<'_> {
    fn kind(&self) -> OracleKind {
        OracleKind::LlmJudge
    }

    fn judge(&mut self, probe: &RankedText) -> Result<bool, OracleError> {
        Ok(llm_judge_oracle(&probe.text, &self.intent, self.gateway)?)
    }
}

/// Shows the probed chunk to an operator and reads `y` / `n`.
pub struct InteractiveOracle<R, W> {
    input: R,
    output: W,
    intent: String,
}

impl<R: BufRead, W: Write> InteractiveOracle<R, W> {
    pub fn new(input: R, output: W, intent: impl Into<String>) -> Self {
        Self {
            input,
            output,
            intent: intent.into(),
        }
    }
}

impl<R: BufRead, W: Write> RelevanceOracle for InteractiveOracle<R, W> {
    fn kind(&self) -> OracleKind {
        OracleKind::InteractivePrompt
    }

    fn judge(&mut self, probe: &RankedText) -> Result<bool, OracleError> {
        let io = |e: std::io::Error| OracleError::Io(e.to_string());
        writeln!(
            self.output,
            "--- rank {} ({}, distance {:.4}) ---\n{}\n---\nLooking for: {}",
            probe.hit.rank, probe.hit.chunk_ref.chunk_id, probe.hit.distance, probe.text.trim_end(), self.intent
        )
        .map_err(io)?;
        loop {
            write!(self.output, "Relevant? [y/n] ").map_err(io)?;
            self.output.flush().map_err(io)?;
            let mut line = String::new();
            if self.input.read_line(&mut line).map_err(io)? == 0 {
                return Err(OracleError::Io("input closed before an answer was given".into()));
            }
            match line.trim().to_ascii_lowercase().as_str() {
                "y" | "yes" => return Ok(true),
                "n" | "no" => return Ok(false),
                _ => {}
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub rank: usize,
    pub distance: f64,
    pub verdict: bool,
    pub oracle_kind: OracleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub accepted: Vec<RankedText>,
    pub boundary: usize,
    pub probes_used: usize,
    pub probe_log: Vec<ProbeRecord>,
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("nothing to filter: the hit list is empty")]
    NoHits,
    #[error("max_probes must be at least 1")]
    ZeroBudget,
    #[error("hits are not sorted by distance (rank {rank})")]
    Unsorted { rank: usize },
    #[error("oracle failed after {} probe(s): {source}", probe_log.len())]
    Oracle {
        source: OracleError,
        probe_log: Vec<ProbeRecord>,
    },
}

/// Binary search for the relevant prefix over the window `[lo, hi)`.
///
/// A relevant verdict at `mid` implies every closer hit is relevant
/// (`lo = mid + 1`); an irrelevant one implies every farther hit is
/// irrelevant (`hi = mid`). When the budget runs out the boundary is `lo`,
/// so only hits proven or implied relevant are accepted.
pub fn ebr_filter(
    hits: &[RankedText],
    oracle: &mut dyn RelevanceOracle,
    max_probes: usize,
) -> Result<FilterOutcome, FilterError> {
    if hits.is_empty() {
        return Err(FilterError::NoHits);
    }
    if max_probes == 0 {
        return Err(FilterError::ZeroBudget);
    }
    if let Some(i) = (1..hits.len()).find(|&i| hits[i].hit.distance < hits[i - 1].hit.distance) {
        return Err(FilterError::Unsorted { rank: i });
    }

    let (mut lo, mut hi) = (0, hits.len());
    let mut probe_log = Vec::new();
    while lo < hi && probe_log.len() < max_probes {
        let mid = lo + (hi - lo) / 2;
        let verdict = match oracle.judge(&hits[mid]) {
            Ok(v) => v,
            Err(source) => return Err(FilterError::Oracle { source, probe_log }),
        };
        let record = ProbeRecord {
            rank: mid,
            distance: hits[mid].hit.distance,
            verdict,
            oracle_kind: oracle.kind(),
        };
        log::debug!("{}", serde_json::to_string(&record).expect("probe record serialization"));
        probe_log.push(record);
        if verdict {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    Ok(FilterOutcome {
        accepted: hits[..lo].to_vec(),
        boundary: lo,
        probes_used: probe_log.len(),
        probe_log,
    })
}
