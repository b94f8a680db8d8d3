//! Answer synthesis, the reflection loop and final answer fusion.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::SourceRegistry;
use crate::llm::{CallKind, LlmRequest, Session};
use crate::planner::{substitute_variables, AnswerEnvironment, Subquery, UnresolvedPlaceholder};
use crate::prompts;
use crate::retrieval::{retrieve_multi_source, FanOut};
use crate::router::{route, should_route, FailHistory, RoutingDecision};
use crate::selection::{select_evidence, BudgetConfig, EvidenceSet, Mode};
use crate::text::render;
use crate::trace::{AttemptTrace, EvidenceItem, PoolSummary, SubqueryTrace};

pub const DEFAULT_MAX_REFLEXION_TIMES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectionConfig {
    pub use_reflection: bool,
    pub max_reflexion_times: u32,
}

impl Default for ReflectionConfig {
    fn default() -> Self {
        Self {
            use_reflection: true,
            max_reflexion_times: DEFAULT_MAX_REFLEXION_TIMES,
        }
    }
}

/// One parsed generator reply.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GeneratedAnswer {
    pub answer: String,
    pub reasoning: String,
    pub sufficient: bool,
    pub warnings: Vec<String>,
}

pub fn render_evidence(evidence: &EvidenceSet) -> String {
    if evidence.is_empty() {
        return "(no evidence retrieved)".to_string();
    }
    evidence
        .items
        .iter()
        .enumerate()
        .map(|(i, c)| match &c.document.title {
            Some(t) => format!("[{}] (source: {}) {}: {}", i + 1, c.source, t, c.document.text),
            None => format!("[{}] (source: {}) {}", i + 1, c.source, c.document.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_synthesis_prompt(bound_query: &str, evidence: &EvidenceSet) -> String {
    render(
        prompts::SYNTHESIS,
        &[("query", bound_query), ("evidence", &render_evidence(evidence))],
    )
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    Answer,
    Reasoning,
    Sufficient,
}

fn label(line: &str) -> Option<(Field, &str)> {
    let line = line.trim().trim_start_matches(['*', '#', '-', ' ']);
    let colon = line.find(':')?;
    let name = line[..colon].trim().trim_matches('*').to_ascii_uppercase();
    let rest = line[colon + 1..].trim_start_matches('*').trim();
    match name.as_str() {
        "ANSWER" | "FINAL ANSWER" => Some((Field::Answer, rest)),
        "REASONING" => Some((Field::Reasoning, rest)),
        "SUFFICIENT" => Some((Field::Sufficient, rest)),
        _ => None,
    }
}

fn parse_flag(value: &str) -> Option<bool> {
    let v = value
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_ascii_lowercase();
    match v.as_str() {
        "yes" | "true" | "y" | "sufficient" | "1" => Some(true),
        "no" | "false" | "n" | "insufficient" | "0" => Some(false),
        _ => None,
    }
}

/// Parses `ANSWER:` / `REASONING:` / `SUFFICIENT:` lines. Unlabeled lines
/// continue the previous field; a reply with no labels is taken as the answer.
/// A missing or unreadable flag defaults to sufficient, with a warning.
pub fn parse_structured_reply(reply: &str) -> GeneratedAnswer {
    let mut answer: Option<String> = None;
    let mut reasoning = String::new();
    let mut flag: Option<String> = None;
    let mut current: Option<Field> = None;
    for line in reply.lines() {
        if let Some((field, rest)) = label(line) {
            current = Some(field);
            match field {
                Field::Answer => answer = Some(rest.to_string()),
                Field::Reasoning => reasoning = rest.to_string(),
                Field::Sufficient => flag = Some(rest.to_string()),
            }
        } else if let Some(field) = current {
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            let target = match field {
                Field::Answer => answer.get_or_insert_with(String::new),
                Field::Reasoning => &mut reasoning,
                Field::Sufficient => continue,
            };
            if !target.is_empty() {
                target.push('\n');
            }
            target.push_str(text);
        }
    }
    let mut warnings = Vec::new();
    let answer = answer.unwrap_or_else(|| {
        warnings.push("reply had no ANSWER label; using whole reply".to_string());
        reply.trim().to_string()
    });
    let sufficient = match flag.as_deref().map(parse_flag) {
        Some(Some(v)) => v,
        Some(None) => {
            warnings.push(format!("unreadable SUFFICIENT flag {:?}; assuming yes", flag.unwrap_or_default()));
            true
        }
        None => {
            warnings.push("reply had no SUFFICIENT flag; assuming yes".to_string());
            true
        }
    };
    GeneratedAnswer {
        answer: answer.trim().to_string(),
        reasoning: reasoning.trim().to_string(),
        sufficient,
        warnings,
    }
}

/// One synthesis call. Transport errors produce an empty, insufficient answer.
pub fn generate_answer(bound_query: &str, evidence: &EvidenceSet, session: &mut Session<'_>) -> GeneratedAnswer {
    let request = LlmRequest::new(CallKind::Generate, render_synthesis_prompt(bound_query, evidence), 512);
    match session.complete(&request) {
        Ok(reply) => parse_structured_reply(&reply),
        Err(err) => GeneratedAnswer {
            answer: String::new(),
            reasoning: String::new(),
            sufficient: false,
            warnings: alloc::vec![format!("generate call failed: {err}")],
        },
    }
}

/// Everything one sub-query chain needs besides its LLM session.
#[derive(Clone, Copy)]
pub struct ChainContext<'a> {
    pub registry: &'a SourceRegistry,
    pub fanout: &'a dyn FanOut,
    pub mode: Mode,
    pub budget: &'a BudgetConfig,
    pub reflection: ReflectionConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubqueryResult {
    pub answer: String,
    pub reasoning: String,
    pub sufficient: bool,
    pub attempts: u32,
    pub evidence_used: EvidenceSet,
    pub fail_history: FailHistory,
    pub trace: SubqueryTrace,
}

impl SubqueryResult {
    /// Final attempt still flagged insufficient evidence.
    pub fn is_fallback(&self) -> bool {
        !self.sufficient
    }
}

fn routing_for(
    ctx: &ChainContext<'_>,
    bound: &str,
    history: &FailHistory,
    attempt: u32,
    session: &mut Session<'_>,
) -> Option<RoutingDecision> {
    if ctx.mode != Mode::Hard && !should_route(&ctx.budget.clamped()) {
        return None;
    }
    if ctx.registry.len() < 2 {
        // nothing to choose between
        return Some(RoutingDecision {
            preferred_source: ctx.registry.names().first().map(|s| s.to_string()),
            raw_reply: String::new(),
            attempt,
            error: None,
        });
    }
    Some(route(bound, &ctx.registry.profiles(), history, attempt, session))
}

/// Runs bind → route → retrieve → cap → select → generate, repeating the
/// whole chain while the generator reports insufficient evidence and retries
/// remain. Each failure adds the routed source to the fail history seen by the
/// next routing call; caps stay fixed.
pub fn run_subquery(
    subquery: &Subquery,
    env: &AnswerEnvironment,
    ctx: &ChainContext<'_>,
    session: &mut Session<'_>,
) -> Result<SubqueryResult, UnresolvedPlaceholder> {
    let bound = substitute_variables(&subquery.template, env)?;
    let max_attempts = if ctx.reflection.use_reflection {
        ctx.reflection.max_reflexion_times + 1
    } else {
        1
    };
    let mut history = FailHistory::new();
    let mut attempts = Vec::new();
    let mut attempt = 1;
    let (generated, evidence) = loop {
        let routing = routing_for(ctx, &bound, &history, attempt, session);
        let preferred = routing.as_ref().and_then(|r| r.preferred_source.clone());
        let pool = retrieve_multi_source(&bound, ctx.registry, ctx.budget.top_k_per_source.max(1), ctx.fanout);
        let selection = select_evidence(&pool, ctx.budget, ctx.mode, preferred.as_deref(), &bound, session);
        let generated = generate_answer(&bound, &selection.evidence, session);
        attempts.push(AttemptTrace {
            attempt,
            routing,
            pool: PoolSummary::from(&pool),
            cap_applied: selection.cap_applied,
            capped: PoolSummary::from(&selection.capped),
            evidence: EvidenceItem::from_set(&selection.evidence),
            judge_fallbacks: selection.judge_fallbacks,
            answer: generated.answer.clone(),
            reasoning: generated.reasoning.clone(),
            sufficient: generated.sufficient,
            warnings: generated.warnings.clone(),
        });
        if generated.sufficient || attempt >= max_attempts {
            break (generated, selection.evidence);
        }
        history.record(&bound, preferred.as_deref(), attempt);
        attempt += 1;
    };
    let trace = SubqueryTrace {
        index: subquery.index,
        template: subquery.template.clone(),
        bound_query: bound,
        attempts,
        answer: generated.answer.clone(),
        sufficient: generated.sufficient,
        fallback: !generated.sufficient,
    };
    Ok(SubqueryResult {
        answer: generated.answer,
        reasoning: generated.reasoning,
        sufficient: generated.sufficient,
        attempts: attempt,
        evidence_used: evidence,
        fail_history: history,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fusion {
    pub answer: String,
    pub fallback: bool,
    pub error: Option<String>,
}

pub fn render_fusion_prompt(question: &str, results: &[SubqueryResult]) -> String {
    let body = results
        .iter()
        .map(|r| {
            format!(
                "[{}] {}\nAnswer: {}\nReasoning: {}",
                r.trace.index, r.trace.bound_query, r.answer, r.reasoning
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n");
    render(prompts::FUSION, &[("question", question), ("results", &body)])
}

/// Combines sub-query answers. One result passes through without an LLM call;
/// a failed or empty fusion reply falls back to the last sub-query's answer.
pub fn fuse_answers(question: &str, results: &[SubqueryResult], session: &mut Session<'_>) -> Fusion {
    let last = results.last().map(|r| r.answer.clone()).unwrap_or_default();
    if results.len() <= 1 {
        return Fusion {
            answer: last,
            fallback: false,
            error: None,
        };
    }
    let request = LlmRequest::new(CallKind::Fuse, render_fusion_prompt(question, results), 256);
    match session.complete(&request) {
        Ok(reply) => {
            let labeled = reply.lines().find_map(|l| match label(l) {
                Some((Field::Answer, rest)) => Some(rest.trim().to_string()),
                _ => None,
            });
            let answer = labeled.unwrap_or_else(|| reply.trim().to_string());
            if answer.is_empty() {
                Fusion {
                    answer: last,
                    fallback: true,
                    error: Some("empty fusion reply".to_string()),
                }
            } else {
                Fusion {
                    answer,
                    fallback: false,
                    error: None,
                }
            }
        }
        Err(err) => Fusion {
            answer: last,
            fallback: true,
            error: Some(err.to_string()),
        },
    }
}
