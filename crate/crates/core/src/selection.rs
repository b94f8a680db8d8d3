//! Adaptive per-source caps and final evidence selection under an item budget.
//!
//! The pool is first trimmed so the routed ("preferred") source keeps at most
//! `preferred_cap` of its top-ranked candidates and every other source keeps at
//! most `other_cap`. Caps only apply when a preferred source exists and both
//! caps are positive, except in [`Mode::Hard`], which always applies
//! `(keep_k, 0)` to emulate single-source routing on the same pipeline.
//!
//! The surviving candidates are then ranked globally by one of three selectors
//! and truncated to `keep_k`. Every selector orders by descending selection
//! score, then registry source order, then rank within the source, then ascending
//! document id.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};

use crate::llm::{CallKind, LlmRequest, Session};
use crate::prompts;
use crate::retrieval::{CandidatePool, ScoredCandidate};
use crate::text::render;

pub const DEFAULT_RRF_CONSTANT: f64 = 60.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    #[default]
    Score,
    Rrf,
    /// LLM relevance grade combined with normalized retrieval score.
    #[serde(alias = "routing_weighted", alias = "llm_judge")]
    Judge,
}

impl core::str::FromStr for Selector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "score" => Ok(Self::Score),
            "rrf" => Ok(Self::Rrf),
            "judge" | "llm_judge" | "routing_weighted" => Ok(Self::Judge),
            other => Err(alloc::format!("unknown selector {other:?} (expected score, rrf or judge)")),
        }
    }
}

impl core::fmt::Display for Selector {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Score => "score",
            Self::Rrf => "rrf",
            Self::Judge => "judge",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Adaptive,
    Hard,
}

impl core::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adaptive" => Ok(Self::Adaptive),
            "hard" => Ok(Self::Hard),
            other => Err(alloc::format!("unknown mode {other:?} (expected hard or adaptive)")),
        }
    }
}

impl core::fmt::Display for Mode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Adaptive => "adaptive",
            Self::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    pub top_k_per_source: usize,
    pub keep_k: usize,
    pub preferred_cap: usize,
    pub other_cap: usize,
    pub selector: Selector,
    pub rrf_constant: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            top_k_per_source: 5,
            keep_k: 5,
            preferred_cap: 3,
            other_cap: 1,
            selector: Selector::Score,
            rrf_constant: DEFAULT_RRF_CONSTANT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errors = Vec::new();
        let mut fail = |field: &str, message: &str| {
            errors.push(FieldError {
                field: field.to_string(),
                message: message.to_string(),
            })
        };
        if self.top_k_per_source == 0 {
            fail("top_k_per_source", "top_k_per_source must be ≥ 1");
        }
        if self.keep_k == 0 {
            fail("keep_k", "keep_k must be ≥ 1");
        }
        if !(self.rrf_constant.is_finite() && self.rrf_constant > 0.0) {
            fail("rrf_constant", "rrf_constant must be a positive number");
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Caps above `top_k_per_source` are clamped to it.
    pub fn clamped(mut self) -> Self {
        self.preferred_cap = self.preferred_cap.min(self.top_k_per_source);
        self.other_cap = self.other_cap.min(self.top_k_per_source);
        self
    }

    /// The caps actually used for `mode`: hard routing keeps only the
    /// preferred source, up to the full budget.
    pub fn effective(self, mode: Mode) -> Self {
        let mut out = self.clamped();
        if mode == Mode::Hard {
            out.preferred_cap = self.keep_k.min(self.top_k_per_source);
            out.other_cap = 0;
        }
        out
    }
}

/// Whether the per-source caps are applied for this routing outcome.
pub fn caps_apply(budget: &BudgetConfig, mode: Mode, preferred: Option<&str>) -> bool {
    preferred.is_some()
        && (mode == Mode::Hard || (budget.preferred_cap > 0 && budget.other_cap > 0))
}

/// Unconditional per-source truncation by `source_rank`.
pub fn cap_pool(pool: &CandidatePool, preferred: &str, c_pref: usize, c_other: usize) -> CandidatePool {
    pool.filtered(|c| {
        let cap = if c.source == preferred { c_pref } else { c_other };
        c.source_rank <= cap
    })
}

/// Guarded cap: with no preferred source or a zero cap the pool is returned
/// unchanged.
pub fn apply_adaptive_cap(
    pool: &CandidatePool,
    preferred: Option<&str>,
    c_pref: usize,
    c_other: usize,
) -> CandidatePool {
    match preferred {
        Some(p) if c_pref > 0 && c_other > 0 => cap_pool(pool, p, c_pref, c_other),
        _ => pool.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvidenceSet {
    pub items: Vec<ScoredCandidate>,
    /// Selector-specific score of `items[i]`.
    pub selection_scores: Vec<f64>,
}

impl EvidenceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|c| c.document.id.as_str()).collect()
    }
}

fn ranked(pool: &CandidatePool, scored: Vec<(ScoredCandidate, f64)>, keep_k: usize) -> EvidenceSet {
    let mut keyed: Vec<(usize, ScoredCandidate, f64)> = scored
        .into_iter()
        .map(|(c, s)| (pool.source_order(&c.source), c, s))
        .collect();
    keyed.sort_by(|a, b| selection_order((a.0, &a.1, a.2), (b.0, &b.1, b.2)));
    keyed.truncate(keep_k);
    let (items, selection_scores) = keyed.into_iter().map(|(_, c, s)| (c, s)).unzip();
    EvidenceSet {
        items,
        selection_scores,
    }
}

fn selection_order(a: (usize, &ScoredCandidate, f64), b: (usize, &ScoredCandidate, f64)) -> Ordering {
    b.2.total_cmp(&a.2)
        .then(a.0.cmp(&b.0))
        .then(a.1.source_rank.cmp(&b.1.source_rank))
        .then_with(|| a.1.document.id.cmp(&b.1.document.id))
}

/// Global sort by raw retrieval score.
pub fn select_score(pool: &CandidatePool, keep_k: usize) -> EvidenceSet {
    let scored = pool.candidates.iter().map(|c| (c.clone(), c.score)).collect();
    ranked(pool, scored, keep_k)
}

/// Reciprocal rank fusion: `1 / (rrf_constant + source_rank)`, summed over
/// sources that returned the same document id. The first occurrence in pool
/// order represents a fused document.
pub fn select_rrf(pool: &CandidatePool, keep_k: usize, rrf_constant: f64) -> EvidenceSet {
    let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fused: Vec<(ScoredCandidate, f64)> = Vec::new();
    for c in &pool.candidates {
        let contribution = 1.0 / (rrf_constant + c.source_rank as f64);
        match slot.get(c.document.id.as_str()) {
            Some(&i) => fused[i].1 += contribution,
            None => {
                slot.insert(c.document.id.as_str(), fused.len());
                fused.push((c.clone(), contribution));
            }
        }
    }
    ranked(pool, fused, keep_k)
}

/// Min-max normalized raw scores; all-equal pools normalize to 1.0.
pub fn normalized_scores(pool: &CandidatePool) -> Vec<f64> {
    let (lo, hi) = pool
        .candidates
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.score), hi.max(c.score)));
    let span = hi - lo;
    pool.candidates
        .iter()
        .map(|c| if span > 0.0 { (c.score - lo) / span } else { 1.0 })
        .collect()
}

/// Ranks by `grade × normalized score`. A missing grade counts as 1.0, so the
/// candidate falls back to its normalized score alone.
pub fn select_graded(pool: &CandidatePool, grades: &[Option<f64>], keep_k: usize) -> EvidenceSet {
    let scored = pool
        .candidates
        .iter()
        .zip(normalized_scores(pool))
        .zip(grades.iter().copied().chain(core::iter::repeat(None)))
        .map(|((c, norm), grade)| (c.clone(), grade.unwrap_or(1.0) * norm))
        .collect();
    ranked(pool, scored, keep_k)
}

/// Reads the first integer in a judge reply and maps 0–10 onto [0, 1].
pub fn parse_grade(reply: &str) -> Option<f64> {
    let start = reply.find(|c: char| c.is_ascii_digit())?;
    let digits: String = reply[start..].chars().take_while(char::is_ascii_digit).collect();
    let value: u32 = digits.parse().ok()?;
    Some(f64::from(value.min(10)) / 10.0)
}

pub fn render_judge_prompt(query: &str, candidate: &ScoredCandidate) -> String {
    let passage = match &candidate.document.title {
        Some(t) => alloc::format!("{t}\n{}", candidate.document.text),
        None => candidate.document.text.clone(),
    };
    render(
        prompts::JUDGE,
        &[("query", query), ("source", &candidate.source), ("passage", &passage)],
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeFallback {
    pub document_id: String,
    pub source: String,
    pub reason: String,
}

/// Grades every candidate with the LLM and ranks by grade × normalized score.
/// Failed or unparseable grades fall back to the normalized score.
pub fn select_judge(
    pool: &CandidatePool,
    query: &str,
    keep_k: usize,
    session: &mut Session<'_>,
) -> (EvidenceSet, Vec<JudgeFallback>) {
    let mut fallbacks = Vec::new();
    let grades: Vec<Option<f64>> = pool
        .candidates
        .iter()
        .map(|c| {
            let request = LlmRequest::new(CallKind::Judge, render_judge_prompt(query, c), 4);
            let outcome = session
                .complete(&request)
                .map_err(|e| e.to_string())
                .and_then(|reply| parse_grade(&reply).ok_or_else(|| alloc::format!("unparseable grade {reply:?}")));
            match outcome {
                Ok(g) => Some(g),
                Err(reason) => {
                    fallbacks.push(JudgeFallback {
                        document_id: c.document.id.clone(),
                        source: c.source.clone(),
                        reason,
                    });
                    None
                }
            }
        })
        .collect();
    (select_graded(pool, &grades, keep_k), fallbacks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub capped: CandidatePool,
    pub cap_applied: bool,
    pub evidence: EvidenceSet,
    pub judge_fallbacks: Vec<JudgeFallback>,
}

/// Caps the pool for `mode`/`preferred`, then runs the configured selector.
pub fn select_evidence(
    pool: &CandidatePool,
    budget: &BudgetConfig,
    mode: Mode,
    preferred: Option<&str>,
    query: &str,
    session: &mut Session<'_>,
) -> Selection {
    let budget = budget.effective(mode);
    let cap_applied = caps_apply(&budget, mode, preferred);
    let capped = match preferred {
        Some(p) if cap_applied => cap_pool(pool, p, budget.preferred_cap, budget.other_cap),
        _ => pool.clone(),
    };
    let (evidence, judge_fallbacks) = match budget.selector {
        Selector::Score => (select_score(&capped, budget.keep_k), Vec::new()),
        Selector::Rrf => (select_rrf(&capped, budget.keep_k, budget.rrf_constant), Vec::new()),
        Selector::Judge => select_judge(&capped, query, budget.keep_k, session),
    };
    Selection {
        capped,
        cap_applied,
        evidence,
        judge_fallbacks,
    }
}
