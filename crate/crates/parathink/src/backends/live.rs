//! Live HTTP backends: a chat-completions-style model client with per-token
//! logprobs and function calling, a configurable search provider, and a
//! fetch-then-extract visit provider.
//!
//! Transport failures are retried three times with exponential backoff;
//! protocol gaps (an endpoint that cannot return logprobs) are reported as
//! capability errors, never papered over.

use super::{
    validate_search_batch, validate_visit_batch, BackendError, ChatMessage, CostModel,
    FinishReason, ModelBackend, ModelRequest, ModelResponse, Role, SearchProvider, SearchResult,
    TokenCounter, VisitProvider, VisitResult, SEARCH_TOP_K,
};
use crate::model::segment::{ScoredToken, StructuredCall};
use crate::model::AssistantStream;
use crate::prompts::PromptSet;
use async_trait::async_trait;
use serde::Deserialize;
use std::sync::Arc;
use std::time::Duration;

const MAX_RETRIES: usize = 3;
const BACKOFF_BASE_MS: u64 = 250;

async fn with_retries<T, F, Fut>(mut call: F) -> Result<T, BackendError>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Result<T, BackendError>>,
{
    let mut last = None;
    for attempt in 0..=MAX_RETRIES {
        match call().await {
            Ok(v) => return Ok(v),
            // Only transport-level failures are retryable.
            Err(BackendError::Transport(msg)) => {
                tracing::warn!(attempt, %msg, "transport failure");
                last = Some(BackendError::Transport(msg));
                if attempt < MAX_RETRIES {
                    tokio::time::sleep(Duration::from_millis(BACKOFF_BASE_MS << attempt)).await;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt ran"))
}

#[derive(Debug, Clone)]
pub struct LiveModelConfig {
    /// Full chat-completions endpoint url.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub cost: CostModel,
}

pub struct LiveModelBackend {
    client: reqwest::Client,
    config: LiveModelConfig,
}

impl LiveModelBackend {
    pub fn new(config: LiveModelConfig) -> Self {
        Self { client: reqwest::Client::new(), config }
    }

    fn request_body(&self, request: &ModelRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| serde_json::json!({"role": m.role.to_string(), "content": m.content}))
            .collect();
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "seed": request.seed,
            "max_tokens": request.max_tokens,
            "logprobs": request.logprobs_required,
        });
        if !request.tool_schemas.is_empty() {
            body["tools"] = serde_json::Value::Array(
                request
                    .tool_schemas
                    .iter()
                    .map(|t| {
                        serde_json::json!({
                            "type": "function",
                            "function": {
                                "name": t.name,
                                "description": t.description,
                                "parameters": t.parameters,
                            }
                        })
                    })
                    .collect(),
            );
        }
        body
    }
}

#[derive(Debug, Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    tool_calls: Vec<WireToolCall>,
}

#[derive(Debug, Deserialize)]
struct WireToolCall {
    function: WireFunction,
}

#[derive(Debug, Deserialize)]
struct WireFunction {
    name: String,
    #[serde(default)]
    arguments: String,
}

#[derive(Debug, Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Vec<WireTokenLogprob>,
}

#[derive(Debug, Deserialize)]
struct WireTokenLogprob {
    token: String,
    logprob: f64,
}

/// Maps a chat-completions payload into a [`ModelResponse`], enforcing the
/// logprob capability when the request demanded it.
pub fn parse_chat_payload(
    payload: &serde_json::Value,
    logprobs_required: bool,
) -> Result<ModelResponse, BackendError> {
    let parsed: WireChatResponse = serde_json::from_value(payload.clone())
        .map_err(|e| BackendError::Protocol(format!("unexpected chat-completions shape: {e}")))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response carries no choices".into()))?;

    let content = choice.message.content.unwrap_or_default();
    let logprob_tokens = choice.logprobs.map(|l| l.content).unwrap_or_default();

    let tokens: Vec<ScoredToken> = if !logprob_tokens.is_empty() {
        logprob_tokens
            .into_iter()
            .map(|t| ScoredToken { text: t.token, logprob: Some(t.logprob) })
            .collect()
    } else if logprobs_required && !content.is_empty() {
        return Err(BackendError::Protocol(
            "endpoint did not return token logprobs; rollout requires the logprobs capability".into(),
        ));
    } else {
        // Logprob-free calls (compression, aggregation) only need the text.
        vec![ScoredToken { text: content.clone(), logprob: None }]
    };

    let structured_calls: Vec<StructuredCall> = choice
        .message
        .tool_calls
        .iter()
        .map(|c| {
            let arguments = serde_json::from_str(&c.function.arguments)
                .unwrap_or(serde_json::Value::Object(Default::default()));
            StructuredCall { tool_name: c.function.name.clone(), arguments, argument_tokens: vec![] }
        })
        .collect();
    if logprobs_required && !structured_calls.is_empty() {
        return Err(BackendError::Protocol(
            "endpoint returned structured tool calls without token-aligned logprobs; \
             serve the agent model with inline <tool_call> markers"
                .into(),
        ));
    }

    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        Some("tool_calls") => FinishReason::ToolCall,
        _ if !structured_calls.is_empty() => FinishReason::ToolCall,
        _ => FinishReason::Terminal,
    };
    Ok(ModelResponse {
        stream: AssistantStream { tokens, structured_calls },
        finish_reason,
    })
}

impl TokenCounter for LiveModelBackend {}

#[async_trait]
impl ModelBackend for LiveModelBackend {
    async fn chat_generate(&self, request: ModelRequest) -> Result<ModelResponse, BackendError> {
        let body = self.request_body(&request);
        with_retries(|| async {
            let mut http = self.client.post(&self.config.endpoint).json(&body);
            if let Some(key) = &self.config.api_key {
                http = http.bearer_auth(key);
            }
            let response = http
                .send()
                .await
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            let status = response.status();
            if status.is_server_error() {
                return Err(BackendError::Transport(format!("server error {status}")));
            }
            if !status.is_success() {
                return Err(BackendError::Protocol(format!("endpoint returned {status}")));
            }
            let payload: serde_json::Value = response
                .json()
                .await
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            parse_chat_payload(&payload, request.logprobs_required)
        })
        .await
    }

    fn cost_model(&self) -> CostModel {
        self.config.cost
    }
}

#[derive(Debug, Clone)]
pub struct LiveSearchConfig {
    /// Endpoint accepting `{"query": ..., "top_k": ...}` and returning
    /// `{"results": [{"title", "url", "snippet"}]}`.
    pub endpoint: String,
    pub api_key: Option<String>,
}

pub struct LiveSearchProvider {
    client: reqwest::Client,
    config: LiveSearchConfig,
}

impl LiveSearchProvider {
    pub fn new(config: LiveSearchConfig) -> Self {
        Self { client: reqwest::Client::new(), config }
    }
}

#[derive(Debug, Deserialize)]
struct WireSearchResponse {
    #[serde(default)]
    results: Vec<SearchResult>,
}

#[async_trait]
impl SearchProvider for LiveSearchProvider {
    async fn search(&self, queries: &[String]) -> Result<Vec<Vec<SearchResult>>, BackendError> {
        validate_search_batch(queries)?;
        let mut out = Vec::with_capacity(queries.len());
        for query in queries {
            let hits = with_retries(|| async {
                let mut http = self
                    .client
                    .post(&self.config.endpoint)
                    .json(&serde_json::json!({"query": query, "top_k": SEARCH_TOP_K}));
                if let Some(key) = &self.config.api_key {
                    http = http.bearer_auth(key);
                }
                let response = http
                    .send()
                    .await
                    .map_err(|e| BackendError::Transport(e.to_string()))?;
                if response.status().is_server_error() {
                    return Err(BackendError::Transport(format!("server error {}", response.status())));
                }
                if !response.status().is_success() {
                    return Err(BackendError::Protocol(format!(
                        "search endpoint returned {}",
                        response.status()
                    )));
                }
                let payload: WireSearchResponse = response
                    .json()
                    .await
                    .map_err(|e| BackendError::Transport(e.to_string()))?;
                Ok(payload.results)
            })
            .await?;
            out.push(hits.into_iter().take(SEARCH_TOP_K).collect());
        }
        Ok(out)
    }
}

/// Fetches pages and extracts goal-relevant content through the model
/// backend with the configurable extraction prompt.
pub struct LiveVisitProvider {
    client: reqwest::Client,
    model: Arc<dyn ModelBackend>,
    prompts: PromptSet,
    /// Fetched page text is cut to this many chars before extraction.
    pub page_char_cap: usize,
}

impl LiveVisitProvider {
    pub fn new(model: Arc<dyn ModelBackend>, prompts: PromptSet) -> Self {
        Self { client: reqwest::Client::new(), model, prompts, page_char_cap: 40_000 }
    }

    async fn visit_one(&self, url: &str, goal: &str) -> Result<String, BackendError> {
        let page = with_retries(|| async {
            let response = self
                .client
                .get(url)
                .send()
                .await
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            if !response.status().is_success() {
                return Err(BackendError::Protocol(format!("fetch returned {}", response.status())));
            }
            response.text().await.map_err(|e| BackendError::Transport(e.to_string()))
        })
        .await?;
        let page: String = page.chars().take(self.page_char_cap).collect();
        let prompt = self
            .prompts
            .visit_extract
            .replace("{goal}", goal)
            .replace("{content}", &page);
        let response = self
            .model
            .chat_generate(ModelRequest {
                messages: vec![ChatMessage { role: Role::User, content: prompt }],
                tool_schemas: vec![],
                temperature: 0.0,
                seed: 0,
                logprobs_required: false,
                max_tokens: 2048,
            })
            .await?;
        Ok(response.stream.content())
    }
}

#[async_trait]
impl VisitProvider for LiveVisitProvider {
    async fn visit(&self, urls: &[String], goal: &str) -> Result<Vec<VisitResult>, BackendError> {
        validate_visit_batch(urls)?;
        let mut out = Vec::with_capacity(urls.len());
        for url in urls {
            match self.visit_one(url, goal).await {
                Ok(content) => out.push(VisitResult { url: url.clone(), content: Some(content), error: None }),
                Err(e) => out.push(VisitResult { url: url.clone(), content: None, error: Some(e.to_string()) }),
            }
        }
        Ok(out)
    }
}
