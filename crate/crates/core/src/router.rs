//! Preferred-source routing through the LLM.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::SourceProfile;
use crate::llm::{CallKind, LlmRequest, Session};
use crate::prompts;
use crate::selection::{BudgetConfig, Selector};
use crate::text::render;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub preferred_source: Option<String>,
    pub raw_reply: String,
    /// 1-based reflection attempt that produced this decision.
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedRoute {
    pub subquery: String,
    pub preferred_source: Option<String>,
    pub attempt: u32,
}

/// Routing preferences that led to insufficient evidence, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailHistory {
    entries: Vec<FailedRoute>,
}

impl FailHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, subquery: &str, preferred_source: Option<&str>, attempt: u32) {
        self.entries.push(FailedRoute {
            subquery: subquery.to_string(),
            preferred_source: preferred_source.map(String::from),
            attempt,
        });
    }

    pub fn entries(&self) -> &[FailedRoute] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct failed source names in first-failure order.
    pub fn failed_sources(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for name in self.entries.iter().filter_map(|e| e.preferred_source.as_deref()) {
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }

    /// Text for the `{fail_history}` slot; empty when nothing has failed.
    pub fn render(&self) -> String {
        let failed = self.failed_sources();
        if failed.is_empty() {
            String::new()
        } else {
            format!("Previously failed sources for this query: {}", failed.join(", "))
        }
    }
}

/// Whether a routing call is needed: both caps active, or the judge selector.
pub fn should_route(budget: &BudgetConfig) -> bool {
    (budget.preferred_cap > 0 && budget.other_cap > 0) || budget.selector == Selector::Judge
}

pub fn render_routing_prompt(query: &str, profiles: &[SourceProfile], fail_history: &FailHistory) -> String {
    let profiles_text = profiles
        .iter()
        .map(|p| format!("{}: {}", p.name, p.description))
        .collect::<Vec<_>>()
        .join("\n");
    let choices = profiles
        .iter()
        .map(|p| p.name.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    let history = fail_history.render();
    render(
        prompts::ROUTING,
        &[
            ("profiles_text", &profiles_text),
            ("query", query),
            ("fail_history", &history),
            ("choices_str", &choices),
        ],
    )
}

/// Maps a free-text reply to a registered name: exact (case-insensitive,
/// trimmed) match first, else the single name contained in the reply.
pub fn match_reply<'a>(reply: &str, names: impl IntoIterator<Item = &'a str> + Clone) -> Option<&'a str> {
    let cleaned = reply
        .trim()
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '.' | ','))
        .to_lowercase();
    if let Some(hit) = names.clone().into_iter().find(|n| n.to_lowercase() == cleaned) {
        return Some(hit);
    }
    let mut contained = names
        .into_iter()
        .filter(|n| !n.is_empty() && cleaned.contains(&n.to_lowercase()));
    match (contained.next(), contained.next()) {
        (Some(only), None) => Some(only),
        _ => None,
    }
}

/// Asks the LLM for a preferred source. Never fails: unmatched replies and
/// transport errors yield `preferred_source = None`.
pub fn route(
    query: &str,
    profiles: &[SourceProfile],
    fail_history: &FailHistory,
    attempt: u32,
    session: &mut Session<'_>,
) -> RoutingDecision {
    let prompt = render_routing_prompt(query, profiles, fail_history);
    let request = LlmRequest::new(CallKind::Route, prompt, 16);
    match session.complete(&request) {
        Ok(reply) => {
            let preferred = match_reply(&reply, profiles.iter().map(|p| p.name.as_str()));
            RoutingDecision {
                preferred_source: preferred.map(String::from),
                error: preferred
                    .is_none()
                    .then(|| "reply matched no registered source".to_string()),
                raw_reply: reply,
                attempt,
            }
        }
        Err(err) => RoutingDecision {
            preferred_source: None,
            raw_reply: String::new(),
            attempt,
            error: Some(err.to_string()),
        },
    }
}
