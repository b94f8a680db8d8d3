//! Answer normalization, EM/F1, deterministic subset sampling and per-arm
//! aggregation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::llm::LlmUsage;
use crate::pipeline::PipelineConfig;
use crate::text::tokenize;
use crate::trace::QuestionTrace;

pub const DEFAULT_STOPWORDS: [&str; 3] = ["a", "an", "the"];

/// Lowercase, strip punctuation, split on whitespace, drop stopwords.
pub fn normalize_with(text: &str, stopwords: &[&str]) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !stopwords.contains(&t.as_str()))
        .collect()
}

pub fn normalize(text: &str) -> Vec<String> {
    normalize_with(text, &DEFAULT_STOPWORDS)
}

pub fn exact_match(prediction: &str, gold: &str) -> u8 {
    u8::from(normalize(prediction) == normalize(gold))
}

/// Token-level F1 over the multiset overlap of normalized tokens.
pub fn f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize(prediction);
    let gold = normalize(gold);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &gold {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best EM and best F1 against any of the gold aliases.
pub fn score_against(prediction: &str, golds: &[String]) -> (u8, f64) {
    golds.iter().fold((0, 0.0), |(em, best), g| {
        (em.max(exact_match(prediction, g)), best.max(f1(prediction, g)))
    })
}

/// `floor(i * dataset_size / n)` for `i` in `0..n`.
pub fn sample_indices(dataset_size: usize, n: usize) -> Vec<usize> {
    let n = n.min(dataset_size);
    (0..n)
        .map(|i| ((i as u128 * dataset_size as u128) / n as u128) as usize)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_source: Option<String>,
}

/// One evaluated query under one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub query_id: String,
    pub arm: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub final_answer: String,
    pub em: u8,
    pub f1: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<QuestionTrace>,
}

impl RunRecord {
    pub fn scored(arm: &str, query: &EvalQuery, trace: QuestionTrace) -> Self {
        let (em, f1) = score_against(&trace.final_answer, &query.answers);
        let usage: LlmUsage = trace.usage;
        Self {
            query_id: query.id.clone(),
            arm: arm.into(),
            question: query.question.clone(),
            gold_answers: query.answers.clone(),
            final_answer: trace.final_answer.clone(),
            em,
            f1,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            fault: None,
            trace: Some(trace),
        }
    }

    /// A query whose pipeline faulted scores zero.
    pub fn faulted(arm: &str, query: &EvalQuery, fault: impl Into<String>) -> Self {
        Self {
            query_id: query.id.clone(),
            arm: arm.into(),
            question: query.question.clone(),
            gold_answers: query.answers.clone(),
            final_answer: String::new(),
            em: 0,
            f1: 0.0,
            prompt_tokens: 0,
            completion_tokens: 0,
            fault: Some(fault.into()),
            trace: None,
        }
    }

    /// Highest attempt count over this record's sub-queries.
    pub fn max_attempts(&self) -> usize {
        self.trace
            .as_ref()
            .map(|t| t.subqueries.iter().map(|s| s.attempts.len()).max().unwrap_or(0))
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    #[serde(flatten)]
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub queries: usize,
    pub mean_em: f64,
    pub mean_f1: f64,
    pub mean_prompt_tokens: f64,
    pub faults: usize,
}

impl ArmSummary {
    pub fn from_records(arm: &str, records: &[RunRecord]) -> Self {
        let n = records.len();
        let mean = |f: &dyn Fn(&RunRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            arm: arm.into(),
            queries: n,
            mean_em: mean(&|r| f64::from(r.em)),
            mean_f1: mean(&|r| r.f1),
            mean_prompt_tokens: mean(&|r| r.prompt_tokens as f64),
            faults: records.iter().filter(|r| r.fault.is_some()).count(),
        }
    }
}
