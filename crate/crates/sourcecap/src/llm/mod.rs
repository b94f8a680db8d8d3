//! LLM backend selection.

pub mod openai;
pub mod stub;

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sourcecap_core::Llm;

pub use openai::{OpenAiClient, OpenAiConfig};
pub use stub::{ScriptedLlm, StubReply, StubScript};

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";
pub const DEFAULT_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Stub,
    Openai,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stub" => Ok(Self::Stub),
            "openai" => Ok(Self::Openai),
            other => Err(format!("unknown backend {other:?} (expected stub or openai)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub stub_script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Stub,
            endpoint: DEFAULT_ENDPOINT.into(),
            model: DEFAULT_MODEL.into(),
            api_key_env: DEFAULT_KEY_ENV.into(),
            stub_script: None,
        }
    }
}

pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn Llm>> {
    match config.kind {
        BackendKind::Stub => {
            let Some(path) = &config.stub_script else {
                bail!("the stub backend needs a script (--stub-script)");
            };
            Ok(Arc::new(ScriptedLlm::from_file(path)?))
        }
        BackendKind::Openai => {
            let key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
            if key.is_none() {
                tracing::warn!(var = %config.api_key_env, "no API key in environment; sending unauthenticated requests");
            }
            let client = OpenAiClient::new(OpenAiConfig::new(&config.endpoint, &config.model, key))
                .context("building HTTP client")?;
            Ok(Arc::new(client))
        }
    }
}
