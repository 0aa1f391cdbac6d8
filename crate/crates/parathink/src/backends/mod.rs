//! Uniform interfaces to model generation and tools, with interchangeable
//! live HTTP clients and a deterministic scripted simulator. Engine code
//! cannot tell the two apart except through configuration.

pub mod conversation;
pub mod live;
pub mod sim;
pub mod tools;

use crate::model::AssistantStream;
use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol capability: {0}")]
    Protocol(String),
    /// A scripted lookup failed: the fixture is broken. Never improvised.
    #[error("scripted scenario miss: {0}")]
    ScriptMiss(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
    pub fn tool(content: impl Into<String>) -> Self {
        Self { role: Role::Tool, content: content.into() }
    }
}

/// Description of one registered tool, surfaced to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub messages: Vec<ChatMessage>,
    pub tool_schemas: Vec<ToolSchema>,
    pub temperature: f64,
    pub seed: i64,
    pub logprobs_required: bool,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Terminal,
    ToolCall,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub stream: AssistantStream,
    pub finish_reason: FinishReason,
}

/// Per-token decode costs used by the reuse accounting. `cold` is the cost
/// of regenerating a token from scratch, `hot` the cost under prefix reuse;
/// `cold >= hot > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub hot_cost_per_token: f64,
    pub cold_cost_per_token: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { hot_cost_per_token: 1.0, cold_cost_per_token: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub title: String,
    pub url: String,
    pub snippet: String,
}

/// Per-url extraction outcome; failures are entries, not batch failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitResult {
    pub url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Maximum queries per search call and urls per visit call.
pub const TOOL_BATCH_CAP: usize = 5;
/// Maximum results returned per query.
pub const SEARCH_TOP_K: usize = 10;

/// Counts text length in the backend's token space. The simulator counts
/// whitespace-separated chunks; live clients approximate the same way unless
/// the serving layer reports exact counts.
pub trait TokenCounter: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[async_trait]
pub trait ModelBackend: TokenCounter + Send + Sync {
    async fn chat_generate(&self, request: ModelRequest) -> Result<ModelResponse, BackendError>;

    fn cost_model(&self) -> CostModel {
        CostModel::default()
    }
}

#[async_trait]
pub trait SearchProvider: Send + Sync {
    /// One ranked result list per query, in input order, up to
    /// [`SEARCH_TOP_K`] entries each. Zero hits is an empty list, not an
    /// error.
    async fn search(&self, queries: &[String]) -> Result<Vec<Vec<SearchResult>>, BackendError>;
}

#[async_trait]
pub trait VisitProvider: Send + Sync {
    /// Goal-conditioned extraction for each url, in input order.
    async fn visit(&self, urls: &[String], goal: &str) -> Result<Vec<VisitResult>, BackendError>;
}

/// Validates a search batch: non-empty, within the cap, no empty queries.
pub fn validate_search_batch(queries: &[String]) -> Result<(), BackendError> {
    if queries.is_empty() {
        return Err(BackendError::InvalidArgument("no queries given".into()));
    }
    if queries.len() > TOOL_BATCH_CAP {
        return Err(BackendError::InvalidArgument(format!(
            "{} queries exceed the batch cap of {TOOL_BATCH_CAP}",
            queries.len()
        )));
    }
    if let Some(i) = queries.iter().position(|q| q.trim().is_empty()) {
        return Err(BackendError::InvalidArgument(format!("query {i} is empty")));
    }
    Ok(())
}

/// Validates a visit batch: non-empty, within the cap, urls syntactically
/// plausible (scheme://host shape).
pub fn validate_visit_batch(urls: &[String]) -> Result<(), BackendError> {
    if urls.is_empty() {
        return Err(BackendError::InvalidArgument("no urls given".into()));
    }
    if urls.len() > TOOL_BATCH_CAP {
        return Err(BackendError::InvalidArgument(format!(
            "{} urls exceed the batch cap of {TOOL_BATCH_CAP}",
            urls.len()
        )));
    }
    if let Some(i) = urls.iter().position(|u| !looks_like_url(u)) {
        return Err(BackendError::InvalidArgument(format!("url {i} ({:?}) is malformed", urls[i])));
    }
    Ok(())
}

fn looks_like_url(u: &str) -> bool {
    let rest = u
        .strip_prefix("https://")
        .or_else(|| u.strip_prefix("http://"));
    matches!(rest, Some(r) if !r.is_empty() && !r.starts_with('/'))
}
