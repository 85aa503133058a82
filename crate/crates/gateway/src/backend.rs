use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::GatewayConfig;
use crate::error::{GatewayError, Result};
use crate::prompt::candidate_ids_in_prompt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatRequest {
    /// A trailing assistant message is a prefill the model continues.
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Number of alternatives to report for the first generated token.
    pub top_logprobs: Option<u8>,
}

impl ChatRequest {
    pub fn prefill(&self) -> Option<&str> {
        self.messages
            .last()
            .filter(|m| m.role == "assistant")
            .map(|m| m.content.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChatResponse {
    pub content: String,
    pub completion_tokens: Option<u64>,
    /// `(token, logprob)` alternatives for the first generated token.
    pub top_logprobs: Option<Vec<(String, f64)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendError {
    pub retryable: bool,
    pub message: String,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, BackendError>;
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    model: String,
    continue_final_message: bool,
}

impl HttpBackend {
    pub fn new(config: &GatewayConfig) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpBackend {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key: config.api_key()?,
            model: config.model.clone(),
            continue_final_message: config.continue_final_message,
        })
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(n) = req.top_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(n);
        }
        if req.prefill().is_some() && self.continue_final_message {
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        body
    }
}

pub fn parse_chat_response(v: &Value) -> Result<ChatResponse> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Response("missing choices[0]".into()))?;
    let content = match choice.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => return Err(GatewayError::Response(format!("content is not a string: {other}"))),
    };
    let completion_tokens = v.pointer("/usage/completion_tokens").and_then(Value::as_u64);
    let top_logprobs = choice
        .pointer("/logprobs/content/0/top_logprobs")
        .and_then(Value::as_array)
        .map(|alts| {
            alts.iter()
                .filter_map(|a| Some((a.get("token")?.as_str()?.to_string(), a.get("logprob")?.as_f64()?)))
                .collect()
        });
    Ok(ChatResponse {
        content,
        completion_tokens,
        top_logprobs,
    })
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, BackendError> {
        let transport = |message: String| BackendError {
            retryable: true,
            message,
        };
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send(self.request_body(req).to_string())
            .map_err(|e| transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError {
                retryable: status == 408 || status == 429 || status >= 500,
                message: format!("HTTP {status}: {}", text.chars().take(300).collect::<String>()),
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| BackendError {
            retryable: false,
            message: format!("response is not JSON: {e}"),
        })?;
        parse_chat_response(&v).map_err(|e| BackendError {
            retryable: false,
            message: e.to_string(),
        })
    }
}

/// Offline backend with fixed behaviour: it echoes the candidate ids of the
/// prompt in their listed order and charges constant token counts per mode.
#[derive(Clone, Debug, PartialEq)]
pub struct StubBackend {
    pub think_tokens: u64,
    pub non_think_tokens: u64,
    pub report_usage: bool,
    /// Yes/No logits returned for every checklist probe.
    pub probe_logits: (f64, f64),
    /// Whether probe responses list the Yes/No alternatives at all.
    pub probe_informative: bool,
}

impl Default for StubBackend {
    fn default() -> Self {
        StubBackend {
            think_tokens: 320,
            non_think_tokens: 48,
            report_usage: true,
            probe_logits: (2.0, 0.0),
            probe_informative: true,
        }
    }
}

impl ChatBackend for StubBackend {
    fn complete(&self, req: &ChatRequest) -> std::result::Result<ChatResponse, BackendError> {
        let user = req
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        if req.max_tokens == 1 {
            let (y, n) = self.probe_logits;
            let answer = if y >= n { "Yes" } else { "No" };
            let top_logprobs = req.top_logprobs.map(|_| {
                if !self.probe_informative {
                    return vec![("Maybe".to_string(), -0.1), ("The".to_string(), -2.5)];
                }
                let m = y.max(n);
                let lse = m + ((y - m).exp() + (n - m).exp()).ln();
                vec![("Yes".to_string(), y - lse), ("No".to_string(), n - lse)]
            });
            return Ok(ChatResponse {
                content: answer.to_string(),
                completion_tokens: self.report_usage.then_some(1),
                top_logprobs,
            });
        }
        let list = format!("Ranking result: [{}]</output>", candidate_ids_in_prompt(user).join(", "));
        let (content, tokens) = match req.prefill() {
            Some("<thought>") => (
                format!("The candidates are compared one by one.</thought>\n<output>{list}"),
                self.think_tokens,
            ),
            Some("<output>") => (list, self.non_think_tokens),
            _ => (format!("<output>{list}"), self.non_think_tokens),
        };
        Ok(ChatResponse {
            content,
            completion_tokens: self.report_usage.then_some(tokens),
            top_logprobs: None,
        })
    }
}
