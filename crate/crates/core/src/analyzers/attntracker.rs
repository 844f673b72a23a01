// SPDX-License-Identifier: MIT OR Apache-2.0

//! Focus score for prompt-injection monitoring.
//!
//! Per head, the share of the scoring token's attention that lands on the
//! instruction span, relative to instruction plus query spans. The run score
//! is the unweighted mean over heads; low scores mean the model's attention
//! drifted away from its instruction.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::selective::{compute_attention_from_qk, SelectiveAttention};
use crate::config::HeadRef;
use crate::error::{Error, Result};
use crate::worker::{load_qk_cache, QkCapture, RunId};

/// Instruction and user-query token spans, both half-open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanPair {
    pub instruction: Range<usize>,
    pub query: Range<usize>,
}

impl SpanPair {
    pub fn new(instruction: Range<usize>, query: Range<usize>) -> Self {
        Self { instruction, query }
    }

    /// Both spans non-empty, disjoint and inside `len` positions.
    pub fn validate(&self, len: usize) -> Result<()> {
        for (name, r) in [("instruction", &self.instruction), ("query", &self.query)] {
            if r.start >= r.end {
                return Err(Error::Span(format!("{name} span {r:?} is empty")));
            }
            if r.end > len {
                return Err(Error::Span(format!(
                    "{name} span {r:?} exceeds context length {len}"
                )));
            }
        }
        if self.instruction.start < self.query.end && self.query.start < self.instruction.end {
            return Err(Error::Span(format!(
                "instruction {:?} and query {:?} overlap",
                self.instruction, self.query
            )));
        }
        Ok(())
    }
}

/// Parses `"is,ie:qs,qe"`.
impl FromStr for SpanPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Span(format!("'{s}' is not of the form is,ie:qs,qe"));
        let range = |part: &str| -> Result<Range<usize>> {
            let (a, b) = part.split_once(',').ok_or_else(bad)?;
            Ok(a.trim().parse().map_err(|_| bad())?..b.trim().parse().map_err(|_| bad())?)
        };
        let (inst, query) = s.split_once(':').ok_or_else(bad)?;
        Ok(Self::new(range(inst)?, range(query)?))
    }
}

/// Head-level reduction of span attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnFunc {
    #[default]
    SumNormalize,
}

impl FromStr for AttnFunc {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum_normalize" => Ok(Self::SumNormalize),
            other => Err(Error::UnknownAttnFunc(other.to_string())),
        }
    }
}

impl fmt::Display for AttnFunc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("sum_normalize")
    }
}

/// What to score: one span pair per prompt of the run, and the heads to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSpec {
    pub input_range: Vec<SpanPair>,
    #[serde(default)]
    pub attn_func: AttnFunc,
    pub head_profile: Vec<HeadRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocusScore {
    pub score: f64,
    pub per_head: BTreeMap<HeadRef, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Benign,
    Suspicious,
}

impl Verdict {
    /// Suspicious iff `score < threshold`.
    pub fn from_score(score: f64, threshold: f64) -> Self {
        if score < threshold {
            Self::Suspicious
        } else {
            Self::Benign
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocusResult {
    pub score: f64,
    pub per_head_scores: BTreeMap<HeadRef, f64>,
    pub verdict: Verdict,
}

impl FocusResult {
    pub fn new(focus: FocusScore, threshold: f64) -> Self {
        Self {
            verdict: Verdict::from_score(focus.score, threshold),
            score: focus.score,
            per_head_scores: focus.per_head,
        }
    }

    /// `{"score": .., "per_head_scores": {"L:H": ..}, "verdict": ..}`
    pub fn to_json(&self) -> Value {
        json!({
            "score": self.score,
            "per_head_scores": per_head_json(&self.per_head_scores),
            "verdict": self.verdict,
        })
    }
}

pub(crate) fn per_head_json(per_head: &BTreeMap<HeadRef, f64>) -> Value {
    Value::Object(
        per_head
            .iter()
            .map(|(h, v)| (h.to_string(), json!(v)))
            .collect(),
    )
}

/// Scores the last captured query row of every head against `spans`.
///
/// A head whose scoring row puts no mass on either span scores 0.
pub fn attn2score(attn: &SelectiveAttention, spans: &SpanPair, func: AttnFunc) -> Result<FocusScore> {
    match func {
        AttnFunc::SumNormalize => {}
    }
    if attn.heads.is_empty() {
        return Err(Error::InvalidInput("no heads to score".into()));
    }
    let mut per_head = BTreeMap::new();
    for (&head, rows) in &attn.heads {
        let row = rows.last();
        spans.validate(row.len())?;
        let s_inst: f64 = row[spans.instruction.clone()].iter().sum();
        let s_query: f64 = row[spans.query.clone()].iter().sum();
        let denom = s_inst + s_query;
        let score = if denom > 0.0 {
            s_inst / denom
        } else {
            tracing::debug!(%head, "no attention on instruction or query span; scoring 0");
            0.0
        };
        per_head.insert(head, score);
    }
    let score = per_head.values().sum::<f64>() / per_head.len() as f64;
    Ok(FocusScore { score, per_head })
}

/// Focus results for every prompt of an in-memory capture.
pub fn focus_results(capture: &QkCapture, spec: &AnalyzerSpec, threshold: f64) -> Result<Vec<FocusResult>> {
    let attention = compute_attention_from_qk(capture, &spec.head_profile)?;
    if attention.len() != spec.input_range.len() {
        return Err(Error::InvalidInput(format!(
            "capture holds {} prompts but {} input ranges were given",
            attention.len(),
            spec.input_range.len()
        )));
    }
    attention
        .iter()
        .zip(&spec.input_range)
        .map(|(attn, spans)| Ok(FocusResult::new(attn2score(attn, spans, spec.attn_func)?, threshold)))
        .collect()
}

/// Loads `qk_<run_id>.qkc` and scores each prompt of the run.
pub fn analyze_injection(
    run_id: &RunId,
    hook_dir: &Path,
    spec: &AnalyzerSpec,
    threshold: f64,
) -> Result<Vec<FocusResult>> {
    let capture = load_qk_cache(run_id, hook_dir)?;
    focus_results(&capture, spec, threshold)
}
