//! Serializable record of everything a pipeline run decided.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::llm::LlmUsage;
use crate::retrieval::{CandidatePool, SourceCount, SourceFailure};
use crate::router::RoutingDecision;
use crate::selection::{EvidenceSet, JudgeFallback};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub document_id: String,
    pub source: String,
    pub source_rank: usize,
    pub raw_score: f64,
    pub selection_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

impl EvidenceItem {
    pub fn from_set(set: &EvidenceSet) -> Vec<Self> {
        set.items
            .iter()
            .zip(&set.selection_scores)
            .map(|(c, &s)| Self {
                document_id: c.document.id.clone(),
                source: c.source.clone(),
                source_rank: c.source_rank,
                raw_score: c.score,
                selection_score: s,
                title: c.document.title.clone(),
                text: c.document.text.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub total: usize,
    pub per_source_counts: Vec<SourceCount>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<SourceFailure>,
}

impl From<&CandidatePool> for PoolSummary {
    fn from(pool: &CandidatePool) -> Self {
        Self {
            total: pool.len(),
            per_source_counts: pool.per_source_counts.clone(),
            failures: pool.failures.clone(),
        }
    }
}

/// One pass of route → retrieve → cap → select → generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptTrace {
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingDecision>,
    pub pool: PoolSummary,
    pub cap_applied: bool,
    pub capped: PoolSummary,
    pub evidence: Vec<EvidenceItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judge_fallbacks: Vec<JudgeFallback>,
    pub answer: String,
    pub reasoning: String,
    pub sufficient: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubqueryTrace {
    pub index: usize,
    pub template: String,
    pub bound_query: String,
    pub attempts: Vec<AttemptTrace>,
    pub answer: String,
    pub sufficient: bool,
    /// The answer came from a final attempt that still flagged insufficient evidence.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTrace {
    pub question: String,
    pub plan_fallback: bool,
    pub subqueries: Vec<SubqueryTrace>,
    pub final_answer: String,
    pub fusion_fallback: bool,
    pub usage: LlmUsage,
    pub llm_calls: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}
