use serde::{Deserialize, Serialize};

use crate::error::{GatewayError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// Endpoint root; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub retry_backoff_ms: u64,
    pub max_concurrency: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub supports_logprobs: bool,
    pub top_logprobs: u8,
    /// Ask the server to continue the assistant prefill instead of opening a
    /// new turn (vLLM/SGLang style `continue_final_message`).
    pub continue_final_message: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: None,
            model: "default".into(),
            timeout_secs: 120,
            max_retries: 3,
            retry_backoff_ms: 500,
            max_concurrency: 4,
            temperature: 0.0,
            max_tokens: 2048,
            supports_logprobs: true,
            top_logprobs: 20,
            continue_final_message: true,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_secs == 0 {
            return Err(GatewayError::Config("timeout_secs must be > 0".into()));
        }
        if self.max_concurrency == 0 {
            return Err(GatewayError::Config("max_concurrency must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::Config("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Reads the key from the configured variable; `None` when no variable
    /// is configured.
    pub fn api_key(&self) -> Result<Option<String>> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| GatewayError::MissingApiKey(var.clone())),
        }
    }
}
