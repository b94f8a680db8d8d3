//! Whole-question execution: decompose, run each sub-query in index order
//! with answers bound into later templates, then fuse.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::SourceRegistry;
use crate::generation::{fuse_answers, run_subquery, ChainContext, ReflectionConfig, SubqueryResult};
use crate::llm::{Llm, Session};
use crate::planner::{decompose, AnswerEnvironment, UnresolvedPlaceholder};
use crate::retrieval::FanOut;
use crate::selection::{BudgetConfig, FieldError, Mode};
use crate::trace::QuestionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub budget: BudgetConfig,
    pub decompose: bool,
    pub use_reflection: bool,
    pub max_reflexion_times: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let reflection = ReflectionConfig::default();
        Self {
            mode: Mode::Adaptive,
            budget: BudgetConfig::default(),
            decompose: true,
            use_reflection: reflection.use_reflection,
            max_reflexion_times: reflection.max_reflexion_times,
        }
    }
}

impl PipelineConfig {
    pub fn reflection(&self) -> ReflectionConfig {
        ReflectionConfig {
            use_reflection: self.use_reflection,
            max_reflexion_times: self.max_reflexion_times,
        }
    }

    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        self.budget.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PipelineFault {
    #[error("empty question")]
    EmptyQuestion,
    #[error("no sources registered")]
    NoSources,
    #[error("sub-query {index} scheduled before its dependency {dependency}")]
    MissingDependency { index: usize, dependency: usize },
    #[error(transparent)]
    Binding(#[from] UnresolvedPlaceholder),
}

pub struct Pipeline<'a> {
    pub registry: &'a SourceRegistry,
    pub fanout: &'a dyn FanOut,
    pub config: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(registry: &'a SourceRegistry, fanout: &'a dyn FanOut, config: PipelineConfig) -> Self {
        Self { registry, fanout, config }
    }

    /// Runs the pipeline and returns the full trace. Per-sub-query results
    /// stay available through [`Pipeline::answer_with_results`].
    pub fn answer(&self, question: &str, llm: &dyn Llm) -> Result<QuestionTrace, PipelineFault> {
        self.answer_with_results(question, llm).map(|(trace, _)| trace)
    }

    pub fn answer_with_results(
        &self,
        question: &str,
        llm: &dyn Llm,
    ) -> Result<(QuestionTrace, Vec<SubqueryResult>), PipelineFault> {
        if question.trim().is_empty() {
            return Err(PipelineFault::EmptyQuestion);
        }
        if self.registry.is_empty() {
            return Err(PipelineFault::NoSources);
        }
        let mut session = Session::new(llm);
        let decomposition = decompose(question, self.config.decompose, &mut session);
        let ctx = ChainContext {
            registry: self.registry,
            fanout: self.fanout,
            mode: self.config.mode,
            budget: &self.config.budget,
            reflection: self.config.reflection(),
        };
        let mut env = AnswerEnvironment::new();
        let mut results: Vec<SubqueryResult> = Vec::with_capacity(decomposition.plan.len());
        for sq in &decomposition.plan.subqueries {
            if let Some(&dependency) = sq.depends_on.iter().find(|&&d| !env.contains(d)) {
                return Err(PipelineFault::MissingDependency { index: sq.index, dependency });
            }
            let result = run_subquery(sq, &env, &ctx, &mut session)?;
            env.insert(sq.index, result.answer.clone());
            results.push(result);
        }
        let fusion = fuse_answers(question, &results, &mut session);
        let mut notes = decomposition.notes;
        if let Some(err) = &fusion.error {
            notes.push(alloc::format!("fusion fell back to last sub-query answer: {err}"));
        }
        let trace = QuestionTrace {
            question: question.to_string(),
            plan_fallback: decomposition.fallback,
            subqueries: results.iter().map(|r| r.trace.clone()).collect(),
            final_answer: fusion.answer,
            fusion_fallback: fusion.fallback,
            usage: session.usage(),
            llm_calls: session.calls().len(),
            notes,
        };
        Ok((trace, results))
    }
}

/// Short human-readable description of a trace, one line per attempt.
pub fn summarize(trace: &QuestionTrace) -> Vec<String> {
    let mut lines = Vec::new();
    for sq in &trace.subqueries {
        lines.push(alloc::format!("[{}] {}", sq.index, sq.bound_query));
        for a in &sq.attempts {
            let routed = a
                .routing
                .as_ref()
                .map(|r| r.preferred_source.clone().unwrap_or_else(|| "none".to_string()))
                .unwrap_or_else(|| "-".to_string());
            let counts = a
                .capped
                .per_source_counts
                .iter()
                .map(|c| alloc::format!("{}={}", c.source, c.count))
                .collect::<Vec<_>>()
                .join(" ");
            lines.push(alloc::format!(
                "  attempt {} preferred={} capped[{}] evidence={} sufficient={}",
                a.attempt,
                routed,
                counts,
                a.evidence.len(),
                if a.sufficient { "yes" } else { "no" }
            ));
        }
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::llm::{CallKind, LlmError, LlmReply, LlmRequest};
    use crate::retrieval::Sequential;
    use alloc::vec;

    struct Planned;

    impl Llm for Planned {
        fn complete(&self, r: &LlmRequest) -> Result<LlmReply, LlmError> {
            let text = match r.kind {
                CallKind::Decompose => "1 | - | Who directed Inception?\n2 | 1 | When was {ans:1} born?",
                CallKind::Route => "films",
                CallKind::Generate if r.user.contains("Who directed") => "ANSWER: Christopher Nolan\nSUFFICIENT: yes",
                CallKind::Generate if r.user.contains("When was Christopher Nolan born?") => "ANSWER: 1970\nSUFFICIENT: yes",
                CallKind::Fuse => "1970",
                _ => return Err(LlmError::Unscripted(r.user.clone())),
            };
            Ok(LlmReply { text: text.into(), usage: None })
        }
    }

    #[test]
    fn two_hop_binds_previous_answer() {
        let mut reg = SourceRegistry::new();
        let d = |id: &str, s: &str, t: &str| Document::new(id, s, None, t).unwrap();
        reg.add_corpus("films", "movies", vec![d("f1", "films", "Inception was directed by Christopher Nolan")]).unwrap();
        reg.add_corpus("people", "bios", vec![d("p1", "people", "Christopher Nolan was born in 1970")]).unwrap();
        let p = Pipeline::new(&reg, &Sequential, PipelineConfig::default());
        let trace = p.answer("When was the director of Inception born?", &Planned).unwrap();
        assert_eq!(trace.final_answer, "1970");
        assert_eq!(trace.subqueries[1].bound_query, "When was Christopher Nolan born?");
        assert!(!trace.fusion_fallback);
        assert_eq!(trace.llm_calls, 1 + 2 * 2 + 1);
        assert!(trace.usage.prompt_tokens > 0);
        assert_eq!(summarize(&trace).len(), 4);
    }

    #[test]
    fn faults() {
        let reg = SourceRegistry::new();
        let p = Pipeline::new(&reg, &Sequential, PipelineConfig::default());
        assert_eq!(p.answer("  ", &Planned).unwrap_err(), PipelineFault::EmptyQuestion);
        assert_eq!(p.answer("q", &Planned).unwrap_err(), PipelineFault::NoSources);
    }
}
