//! Backend-neutral LLM access and token accounting.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Which pipeline stage issued a call. Never sent over the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Route,
    Judge,
    Decompose,
    Generate,
    Fuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub kind: CallKind,
    pub system: String,
    pub user: String,
    pub temperature: f32,
    pub max_output: u32,
}

impl LlmRequest {
    /// Pipeline calls always run at temperature 0.
    pub fn new(kind: CallKind, user: String, max_output: u32) -> Self {
        Self {
            kind,
            system: String::new(),
            user,
            temperature: 0.0,
            max_output,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl LlmUsage {
    pub fn add(&mut self, other: LlmUsage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmReply {
    pub text: String,
    /// Provider-reported usage; `None` makes the session count locally.
    pub usage: Option<LlmUsage>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("unscripted prompt: {0}")]
    Unscripted(String),
    #[error("backend not configured: {0}")]
    NotConfigured(String),
}

pub trait Llm: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmReply, LlmError>;
}

impl<T: Llm + ?Sized> Llm for &T {
    fn complete(&self, request: &LlmRequest) -> Result<LlmReply, LlmError> {
        (**self).complete(request)
    }
}

impl<T: Llm + ?Sized> Llm for alloc::sync::Arc<T> {
    fn complete(&self, request: &LlmRequest) -> Result<LlmReply, LlmError> {
        (**self).complete(request)
    }
}

impl<T: Llm + ?Sized> Llm for alloc::boxed::Box<T> {
    fn complete(&self, request: &LlmRequest) -> Result<LlmReply, LlmError> {
        (**self).complete(request)
    }
}

/// Coarse token count: number of whitespace-separated pieces.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Local usage estimate for a request/reply pair.
pub fn local_usage(request: &LlmRequest, reply: &str) -> LlmUsage {
    LlmUsage {
        prompt_tokens: count_tokens(&request.system) + count_tokens(&request.user),
        completion_tokens: count_tokens(reply),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub kind: CallKind,
    pub usage: LlmUsage,
    pub ok: bool,
}

/// One pipeline run's view of the backend: forwards calls and accumulates usage.
pub struct Session<'a> {
    llm: &'a dyn Llm,
    usage: LlmUsage,
    calls: Vec<CallRecord>,
}

impl<'a> Session<'a> {
    pub fn new(llm: &'a dyn Llm) -> Self {
        Self {
            llm,
            usage: LlmUsage::default(),
            calls: Vec::new(),
        }
    }

    pub fn complete(&mut self, request: &LlmRequest) -> Result<String, LlmError> {
        match self.llm.complete(request) {
            Ok(reply) => {
                let usage = reply.usage.unwrap_or_else(|| local_usage(request, &reply.text));
                self.usage.add(usage);
                self.calls.push(CallRecord {
                    kind: request.kind,
                    usage,
                    ok: true,
                });
                Ok(reply.text)
            }
            Err(err) => {
                self.calls.push(CallRecord {
                    kind: request.kind,
                    usage: LlmUsage::default(),
                    ok: false,
                });
                Err(err)
            }
        }
    }

    pub fn usage(&self) -> LlmUsage {
        self.usage
    }

    pub fn calls(&self) -> &[CallRecord] {
        &self.calls
    }

    pub fn count(&self, kind: CallKind) -> usize {
        self.calls.iter().filter(|c| c.kind == kind).count()
    }
}
