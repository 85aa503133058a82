//! Client for OpenAI-compatible chat endpoints that forces the inference
//! mode through an assistant prefill, parses ranking answers, runs checklist
//! probes and records dual-mode logs. [`StubBackend`] answers offline.

pub mod backend;
pub mod client;
pub mod config;
pub mod error;
pub mod parse;
pub mod prompt;

pub use backend::{ChatBackend, ChatRequest, ChatResponse, HttpBackend, Message, StubBackend};
pub use client::{bounded_map, CollectSummary, Gateway};
pub use config::GatewayConfig;
pub use error::{GatewayError, Result};
pub use parse::{parse_ranking, ParsedRanking};
pub use prompt::{render_prompt, PromptBundle, RequestMode};
