//! Scores extraction outputs against human gold annotations.
//!
//! Plain precision and recall count an acceptable answer as wrong; the
//! `_ac` variants count it as right.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::pipeline::ExtractionResult;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no judgments for {0}")]
    NoJudgments(EvalStage),
    #[error("{path}: {location}: {message}")]
    Schema {
        path: PathBuf,
        /// `line:column` for syntax errors, a field path for invalid values.
        location: String,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStage {
    Stage2,
    Stage3,
    Stage4,
}

impl fmt::Display for EvalStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalStage::Stage2 => "Stage 2",
            EvalStage::Stage3 => "Stage 3",
            EvalStage::Stage4 => "Stage 4",
        })
    }
}

/// Identifies one gold item: the document plus the descriptor (stage 2) or
/// entity and attribute (stage 4). Stage 3 items are keyed by document only.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemKey {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
}

impl ItemKey {
    fn normalized(&self) -> ItemKey {
        let n = |o: &Option<String>| o.as_deref().map(normalize);
        ItemKey {
            doc_id: self.doc_id.clone(),
            descriptor: n(&self.descriptor),
            entity: n(&self.entity),
            attribute: n(&self.attribute),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub stage: EvalStage,
    #[serde(flatten)]
    pub key: ItemKey,
    pub correct: String,
    #[serde(default)]
    pub acceptable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub stage: EvalStage,
    #[serde(flatten)]
    pub key: ItemKey,
    pub predicted: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TruePositive,
    AcceptablePositive,
    FalsePositive,
    FalseNegative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub stage: EvalStage,
    #[serde(flatten)]
    pub key: ItemKey,
    pub predicted: Option<String>,
    pub verdict: Verdict,
}

/// Lowercase, single spaces, no punctuation at either end.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace() || matches!(c, '“' | '”' | '‘' | '’'))
        .to_string()
}

pub fn match_prediction(predicted: Option<&str>, gold: &GoldAnnotation) -> Verdict {
    let Some(p) = predicted.map(normalize) else {
        return Verdict::FalseNegative;
    };
    if p == normalize(&gold.correct) {
        Verdict::TruePositive
    } else if gold.acceptable.iter().any(|a| normalize(a) == p) {
        Verdict::AcceptablePositive
    } else {
        Verdict::FalsePositive
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub ap: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: EvalStage,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_ac: f64,
    pub recall_ac: f64,
    pub f1_ac: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
    /// Whether the AC rows are shown for this stage in the table.
    pub show_ac: bool,
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn compute_metrics(judgments: &[Judgment], stage: EvalStage) -> Result<StageMetrics, EvalError> {
    let mut c = Counts::default();
    let mut any = false;
    for j in judgments.iter().filter(|j| j.stage == stage) {
        any = true;
        match j.verdict {
            Verdict::TruePositive => c.tp += 1,
            Verdict::AcceptablePositive => c.ap += 1,
            Verdict::FalsePositive => c.fp += 1,
            Verdict::FalseNegative => c.fn_ += 1,
        }
    }
    if !any {
        return Err(EvalError::NoJudgments(stage));
    }
    let mut degenerate = false;
    let predicted = c.tp + c.ap + c.fp;
    let relevant = c.tp + c.ap + c.fn_;
    let precision = ratio(c.tp, predicted, &mut degenerate);
    let precision_ac = ratio(c.tp + c.ap, predicted, &mut degenerate);
    let recall = ratio(c.tp, relevant, &mut degenerate);
    let recall_ac = ratio(c.tp + c.ap, relevant, &mut degenerate);
    Ok(StageMetrics {
        stage,
        counts: c,
        precision,
        recall,
        f1: harmonic(precision, recall),
        precision_ac,
        recall_ac,
        f1_ac: harmonic(precision_ac, recall_ac),
        degenerate,
        show_ac: stage != EvalStage::Stage3,
    })
}

/// Judges every gold item and every unmatched prediction.
///
/// Stages 2 and 4 pair gold and prediction by item key. Stage 3 compares
/// name sets per document: each gold entity takes the best matching
/// prediction, and predictions matching no gold entity are false positives.
pub fn judge(gold: &[GoldAnnotation], predictions: &[Prediction]) -> Vec<Judgment> {
    let mut out = Vec::new();
    let mut used = vec![false; predictions.len()];
    for g in gold {
        let key = g.key.normalized();
        let mut candidates = predictions
            .iter()
            .enumerate()
            .filter(|(i, p)| !used[*i] && p.stage == g.stage && p.key.normalized() == key);
        let chosen = if g.stage == EvalStage::Stage3 {
            let pool: Vec<(usize, &Prediction)> = candidates.collect();
            let best = |v: Verdict| {
                pool.iter()
                    .find(|(_, p)| match_prediction(Some(&p.predicted), g) == v)
                    .copied()
            };
            best(Verdict::TruePositive).or_else(|| best(Verdict::AcceptablePositive))
        } else {
            candidates.next()
        };
        if let Some((i, _)) = chosen {
            used[i] = true;
        }
        let predicted = chosen.map(|(_, p)| p.predicted.clone());
        out.push(Judgment {
            stage: g.stage,
            key: g.key.clone(),
            verdict: match_prediction(predicted.as_deref(), g),
            predicted,
        });
    }
    for (p, _) in predictions.iter().zip(&used).filter(|(_, u)| !**u) {
        out.push(Judgment {
            stage: p.stage,
            key: p.key.clone(),
            predicted: Some(p.predicted.clone()),
            verdict: Verdict::FalsePositive,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stages: Vec<StageMetrics>,
    pub judgments: Vec<Judgment>,
}

/// Judges and scores every stage that has gold annotations.
pub fn evaluate(gold: &[GoldAnnotation], predictions: &[Prediction]) -> Result<EvalReport, EvalError> {
    let judgments = judge(gold, predictions);
    let stages: BTreeSet<EvalStage> = gold.iter().map(|g| g.stage).collect();
    let mut metrics = Vec::new();
    for stage in stages {
        let mut m = compute_metrics(&judgments, stage)?;
        if stage == EvalStage::Stage3 {
            m.show_ac = gold.iter().any(|g| g.stage == stage && !g.acceptable.is_empty());
        }
        metrics.push(m);
    }
    Ok(EvalReport {
        stages: metrics,
        judgments,
    })
}

fn percent(v: f64) -> String {
    format!("{:.0}%", v * 100.0)
}

/// Plain-text table with one column per stage.
pub fn render_table(report: &EvalReport) -> String {
    type Row = (&'static str, fn(&StageMetrics) -> f64, bool);
    let rows: [Row; 6] = [
        ("Precision", |m| m.precision, false),
        ("Precision AC.", |m| m.precision_ac, true),
        ("Recall", |m| m.recall, false),
        ("Recall AC.", |m| m.recall_ac, true),
        ("F1", |m| m.f1, false),
        ("F1 AC.", |m| m.f1_ac, true),
    ];
    let mut out = format!("{:<15}", "");
    for m in &report.stages {
        write!(out, "{:>10}", m.stage.to_string()).unwrap();
    }
    out.push('\n');
    for (label, value, ac) in rows {
        write!(out, "{label:<15}").unwrap();
        for m in &report.stages {
            let cell = if ac && !m.show_ac { "-".to_string() } else { percent(value(m)) };
            write!(out, "{cell:>10}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoldFile {
    stage: EvalStage,
    items: Vec<GoldItem>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoldItem {
    #[serde(flatten)]
    key: ItemKey,
    correct: String,
    #[serde(default)]
    acceptable: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionFile {
    stage: EvalStage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
    items: Vec<PredictionItem>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionItem {
    #[serde(flatten)]
    key: ItemKey,
    predicted: String,
}

fn read(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn schema(path: &Path, location: impl Into<String>, message: impl Into<String>) -> EvalError {
    EvalError::Schema {
        path: path.to_path_buf(),
        location: location.into(),
        message: message.into(),
    }
}

fn parse_sets<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<Vec<T>, EvalError> {
    // Parse as a plain value first so syntax errors keep their position.
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| schema(path, format!("{}:{}", e.line(), e.column()), e.to_string()))?;
    let sets = if value.is_array() {
        value.as_array().unwrap().clone()
    } else {
        vec![value]
    };
    sets.into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value::<T>(v).map_err(|e| schema(path, format!("[{i}]"), e.to_string())))
        .collect()
}

fn check_key(path: &Path, at: &str, stage: EvalStage, key: &ItemKey) -> Result<(), EvalError> {
    let present = |o: &Option<String>| o.as_deref().is_some_and(|s| !s.trim().is_empty());
    if key.doc_id.trim().is_empty() {
        return Err(schema(path, format!("{at}.doc_id"), "must not be empty"));
    }
    let missing = match stage {
        EvalStage::Stage2 => (!present(&key.descriptor)).then_some("descriptor"),
        EvalStage::Stage3 => None,
        EvalStage::Stage4 => {
            if !present(&key.entity) {
                Some("entity")
            } else if !present(&key.attribute) {
                Some("attribute")
            } else {
                None
            }
        }
    };
    match missing {
        Some(field) => Err(schema(path, format!("{at}.{field}"), format!("required for {stage} items"))),
        None => Ok(()),
    }
}

pub fn parse_gold(path: &Path, text: &str) -> Result<Vec<GoldAnnotation>, EvalError> {
    let sets: Vec<GoldFile> = parse_sets(path, text)?;
    let mut out = Vec::new();
    for (s, set) in sets.into_iter().enumerate() {
        for (i, item) in set.items.into_iter().enumerate() {
            let at = format!("[{s}].items[{i}]");
            check_key(path, &at, set.stage, &item.key)?;
            if item.correct.trim().is_empty() {
                return Err(schema(path, format!("{at}.correct"), "must not be empty"));
            }
            for (a, alt) in item.acceptable.iter().enumerate() {
                if alt.trim().is_empty() {
                    return Err(schema(path, format!("{at}.acceptable[{a}]"), "must not be empty"));
                }
                if normalize(alt) == normalize(&item.correct) {
                    return Err(schema(path, format!("{at}.acceptable[{a}]"), "repeats the correct answer"));
                }
            }
            out.push(GoldAnnotation {
                stage: set.stage,
                key: item.key,
                correct: item.correct,
                acceptable: item.acceptable,
            });
        }
    }
    Ok(out)
}

pub fn load_gold(path: &Path) -> Result<Vec<GoldAnnotation>, EvalError> {
    parse_gold(path, &read(path)?)
}

pub fn parse_predictions(path: &Path, text: &str) -> Result<Vec<Prediction>, EvalError> {
    let sets: Vec<PredictionFile> = parse_sets(path, text)?;
    let mut out = Vec::new();
    for (s, set) in sets.into_iter().enumerate() {
        for (i, item) in set.items.into_iter().enumerate() {
            check_key(path, &format!("[{s}].items[{i}]"), set.stage, &item.key)?;
            out.push(Prediction {
                stage: set.stage,
                key: item.key,
                predicted: item.predicted,
            });
        }
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    parse_predictions(path, &read(path)?)
}

/// Prediction sets for stages 2 to 4 derived from a pipeline run, as JSON.
pub fn predictions_json(result: &ExtractionResult) -> serde_json::Value {
    let mut stage2 = Vec::new();
    for a in &result.assignments {
        if let Some(attr) = &a.attribute {
            stage2.push(PredictionItem {
                key: ItemKey {
                    doc_id: a.doc_id.clone(),
                    descriptor: Some(a.descriptor.clone()),
                    entity: None,
                    attribute: None,
                },
                predicted: attr.clone(),
            });
        }
    }
    let doc_key = |doc_id: &str| ItemKey {
        doc_id: doc_id.to_string(),
        descriptor: None,
        entity: None,
        attribute: None,
    };
    let stage3 = result
        .entities
        .iter()
        .map(|e| PredictionItem {
            key: doc_key(&e.doc_id),
            predicted: e.name.clone(),
        })
        .collect();
    let mut stage4 = Vec::new();
    for r in &result.records {
        for (attr, value) in r.attributes.iter() {
            stage4.push(PredictionItem {
                key: ItemKey {
                    entity: Some(r.entity.clone()),
                    attribute: Some(attr.to_string()),
                    ..doc_key(&r.doc_id)
                },
                predicted: value.clone(),
            });
        }
    }
    let digest = Some(result.metadata.config_digest.clone());
    let sets = [
        PredictionFile {
            stage: EvalStage::Stage2,
            config_digest: digest.clone(),
            items: stage2,
        },
        PredictionFile {
            stage: EvalStage::Stage3,
            config_digest: digest.clone(),
            items: stage3,
        },
        PredictionFile {
            stage: EvalStage::Stage4,
            config_digest: digest.clone(),
            items: stage4,
        },
    ];
    serde_json::to_value(sets).expect("prediction serialization")
}

pub fn export_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut bytes = serde_json::to_vec_pretty(report).expect("report serialization");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| schema(path, format!("{}:{}", e.line(), e.column()), e.to_string()))
}
