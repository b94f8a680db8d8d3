//! Blocking client for OpenAI-compatible `/chat/completions` endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sourcecap_core::llm::local_usage;
use sourcecap_core::{Llm, LlmError, LlmReply, LlmRequest, LlmUsage};

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f32,
    max_tokens: u32,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl OpenAiConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct OpenAiClient {
    http: reqwest::blocking::Client,
    config: OpenAiConfig,
}

impl OpenAiClient {
    pub fn new(config: OpenAiConfig) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::NotConfigured(e.to_string()))?;
        Ok(Self { http, config })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Result<ChatResponse, LlmError> {
        let mut req = self.http.post(self.url()).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(LlmError::Http {
                status: status.as_u16(),
                body: body.chars().take(500).collect(),
            });
        }
        resp.json::<ChatResponse>()
            .map_err(|e| LlmError::Malformed(e.to_string()))
    }
}

fn retryable(err: &LlmError) -> bool {
    match err {
        LlmError::Transport(_) => true,
        LlmError::Http { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl Llm for OpenAiClient {
    fn complete(&self, request: &LlmRequest) -> Result<LlmReply, LlmError> {
        let mut messages = Vec::with_capacity(2);
        if !request.system.is_empty() {
            messages.push(Message {
                role: "system",
                content: &request.system,
            });
        }
        messages.push(Message {
            role: "user",
            content: &request.user,
        });
        let body = ChatRequest {
            model: &self.config.model,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_output,
        };
        let mut backoff = self.config.initial_backoff;
        let attempts = self.config.max_attempts.max(1);
        let mut last = None;
        for i in 0..attempts {
            match self.attempt(&body) {
                Ok(resp) => {
                    let text = resp
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.message.content)
                        .ok_or_else(|| LlmError::Malformed("response has no message content".into()))?;
                    let usage = resp
                        .usage
                        .map(|u| LlmUsage {
                            prompt_tokens: u.prompt_tokens,
                            completion_tokens: u.completion_tokens,
                        })
                        .unwrap_or_else(|| local_usage(request, &text));
                    return Ok(LlmReply {
                        text,
                        usage: Some(usage),
                    });
                }
                Err(err) if retryable(&err) && i + 1 < attempts => {
                    tracing::warn!(attempt = i + 1, error = %err, "LLM call failed, retrying");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    last = Some(err);
                }
                Err(err) => return Err(err),
            }
        }
        Err(last.unwrap_or_else(|| LlmError::Transport("no attempts made".into())))
    }
}
