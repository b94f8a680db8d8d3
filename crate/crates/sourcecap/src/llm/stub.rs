//! Deterministic scripted backend for offline runs and tests.
//!
//! Rules are tried in order; a rule matches when its pattern is a substring of
//! the prompt (and its call kind matches, if given). A pattern may also be a
//! list of substrings, all of which must occur. A rule with several
//! replies hands them out in order and stops matching once exhausted, unless
//! `repeat_last` is set. When no rule matches, the FIFO queue is consulted;
//! when that is empty the call fails with [`LlmError::Unscripted`].
//!
//! Script files are JSON:
//!
//! ```json
//! {
//!   "rules": [
//!     {"kind": "route", "pattern": "", "reply": "wiki"},
//!     {"pattern": "capital of France", "replies": ["ANSWER: ?\nSUFFICIENT: no", "ANSWER: Paris\nSUFFICIENT: yes"]},
//!     {"kind": "generate", "pattern": ["QUERY:\nWho wrote", "Hamlet"], "reply": "ANSWER: Shakespeare\nSUFFICIENT: yes"},
//!     {"pattern": "flaky", "reply": {"error": "connection reset"}}
//!   ],
//!   "queue": ["ANSWER: fallback\nSUFFICIENT: yes"]
//! }
//! ```

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sourcecap_core::llm::local_usage;
use sourcecap_core::{CallKind, Llm, LlmError, LlmReply, LlmRequest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StubReply {
    Text(String),
    Error { error: String },
}

impl From<&str> for StubReply {
    fn from(s: &str) -> Self {
        Self::Text(s.to_string())
    }
}

impl From<String> for StubReply {
    fn from(s: String) -> Self {
        Self::Text(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum Pattern {
    One(String),
    All(Vec<String>),
}

impl Default for Pattern {
    fn default() -> Self {
        Self::One(String::new())
    }
}

impl From<Pattern> for Vec<String> {
    fn from(p: Pattern) -> Self {
        match p {
            Pattern::One(s) => vec![s],
            Pattern::All(v) => v,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RuleSpec {
    #[serde(default)]
    pattern: Pattern,
    #[serde(default)]
    kind: Option<CallKind>,
    #[serde(default)]
    reply: Option<StubReply>,
    #[serde(default)]
    replies: Vec<StubReply>,
    #[serde(default)]
    repeat_last: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StubScript {
    #[serde(default)]
    rules: Vec<RuleSpec>,
    #[serde(default)]
    queue: Vec<StubReply>,
}

#[derive(Debug)]
struct Rule {
    patterns: Vec<String>,
    kind: Option<CallKind>,
    replies: VecDeque<StubReply>,
    /// Fixed replies never run out.
    sticky: bool,
}

#[derive(Debug, Default)]
struct State {
    rules: Vec<Rule>,
    queue: VecDeque<StubReply>,
    log: Vec<LlmRequest>,
}

#[derive(Debug, Default)]
pub struct ScriptedLlm {
    state: Mutex<State>,
}

impl ScriptedLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_script(script: StubScript) -> Self {
        let mut llm = Self::new();
        for spec in script.rules {
            let mut replies: VecDeque<StubReply> = spec.replies.into();
            let single = spec.reply.is_some();
            if let Some(r) = spec.reply {
                replies.push_front(r);
            }
            llm.push_rule(Rule {
                patterns: spec.pattern.into(),
                kind: spec.kind,
                replies,
                sticky: single || spec.repeat_last,
            });
        }
        llm.state.get_mut().unwrap().queue.extend(script.queue);
        llm
    }

    pub fn from_json(json: &str) -> anyhow::Result<Self> {
        let script: StubScript = serde_json::from_str(json).context("parsing stub script")?;
        Ok(Self::from_script(script))
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    fn push_rule(&mut self, rule: Rule) {
        self.state.get_mut().unwrap().rules.push(rule);
    }

    /// Always answers `reply` when `pattern` occurs in the prompt.
    pub fn rule(mut self, pattern: &str, reply: impl Into<StubReply>) -> Self {
        self.push_rule(Rule {
            patterns: vec![pattern.into()],
            kind: None,
            replies: VecDeque::from([reply.into()]),
            sticky: true,
        });
        self
    }

    /// Like [`ScriptedLlm::rule`] but only for calls of `kind`.
    pub fn on(mut self, kind: CallKind, pattern: &str, reply: impl Into<StubReply>) -> Self {
        self.push_rule(Rule {
            patterns: vec![pattern.into()],
            kind: Some(kind),
            replies: VecDeque::from([reply.into()]),
            sticky: true,
        });
        self
    }

    /// Hands out `replies` in order, then stops matching.
    pub fn sequence<R: Into<StubReply>>(
        mut self,
        kind: Option<CallKind>,
        pattern: &str,
        replies: impl IntoIterator<Item = R>,
    ) -> Self {
        self.push_rule(Rule {
            patterns: vec![pattern.into()],
            kind,
            replies: replies.into_iter().map(Into::into).collect(),
            sticky: false,
        });
        self
    }

    /// Answers `reply` to calls of `kind` whose prompt contains every pattern.
    pub fn on_all(mut self, kind: CallKind, patterns: &[&str], reply: impl Into<StubReply>) -> Self {
        self.push_rule(Rule {
            patterns: patterns.iter().map(|p| p.to_string()).collect(),
            kind: Some(kind),
            replies: VecDeque::from([reply.into()]),
            sticky: true,
        });
        self
    }

    pub fn queue(self, reply: impl Into<StubReply>) -> Self {
        self.state.lock().unwrap().queue.push_back(reply.into());
        self
    }

    /// Every request seen so far, in call order.
    pub fn requests(&self) -> Vec<LlmRequest> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn calls_of(&self, kind: CallKind) -> usize {
        self.state.lock().unwrap().log.iter().filter(|r| r.kind == kind).count()
    }
}

impl Llm for ScriptedLlm {
    fn complete(&self, request: &LlmRequest) -> Result<LlmReply, LlmError> {
        let mut state = self.state.lock().unwrap();
        state.log.push(request.clone());
        let prompt = if request.system.is_empty() {
            request.user.clone()
        } else {
            format!("{}\n{}", request.system, request.user)
        };
        let from_rule = state.rules.iter_mut().find_map(|rule| {
            let kind_ok = rule.kind.is_none_or(|k| k == request.kind);
            if !kind_ok || rule.replies.is_empty() || !rule.patterns.iter().all(|p| prompt.contains(p.as_str())) {
                return None;
            }
            if rule.sticky && rule.replies.len() == 1 {
                rule.replies.front().cloned()
            } else {
                rule.replies.pop_front()
            }
        });
        let reply = from_rule.or_else(|| state.queue.pop_front());
        match reply {
            Some(StubReply::Text(text)) => Ok(LlmReply {
                usage: Some(local_usage(request, &text)),
                text,
            }),
            Some(StubReply::Error { error }) => Err(LlmError::Transport(error)),
            None => {
                let head: String = request.user.chars().take(80).collect();
                Err(LlmError::Unscripted(head))
            }
        }
    }
}
