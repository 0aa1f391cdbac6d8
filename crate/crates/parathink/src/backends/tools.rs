//! Tool registry and the two standard information-seeking tools.
//!
//! Tools receive the model's structured arguments and return plain response
//! text. Failures never abort a rollout: an unknown tool or a bad argument
//! yields an errored tool response and the loop continues.

use super::{
    validate_search_batch, validate_visit_batch, BackendError, SearchProvider, SearchResult,
    ToolSchema, VisitProvider, VisitResult,
};
use async_trait::async_trait;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Appended when a tool response exceeds the configured token cap.
pub const TRUNCATION_MARKER: &str = "\n[response truncated]";

/// Raw outcome of a tool invocation before token accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutcome {
    pub content: String,
    pub error_flag: bool,
}

impl ToolOutcome {
    fn ok(content: String) -> Self {
        Self { content, error_flag: false }
    }
    fn err(content: String) -> Self {
        Self { content, error_flag: true }
    }
}

#[async_trait]
pub trait Tool: Send + Sync {
    fn name(&self) -> &str;
    fn schema(&self) -> ToolSchema;
    async fn invoke(&self, arguments: &serde_json::Value) -> Result<String, BackendError>;
}

/// Named tools available to a rollout. An empty registry makes tool calls
/// structurally impossible, which the aggregation stage relies on.
#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn Tool>>,
}

impl ToolRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The standard Search/Visit pair over the given providers.
    pub fn standard(search: Arc<dyn SearchProvider>, visit: Arc<dyn VisitProvider>) -> Self {
        let mut reg = Self::default();
        reg.register(Arc::new(SearchTool { provider: search }));
        reg.register(Arc::new(VisitTool { provider: visit }));
        reg
    }

    pub fn register(&mut self, tool: Arc<dyn Tool>) {
        self.tools.insert(tool.name().to_string(), tool);
    }

    pub fn schemas(&self) -> Vec<ToolSchema> {
        self.tools.values().map(|t| t.schema()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Runs the named tool. Unknown names and argument or provider failures
    /// come back as errored outcomes, matching real agent behaviour.
    pub async fn invoke(&self, tool_name: &str, arguments: &serde_json::Value) -> ToolOutcome {
        let Some(tool) = self.tools.get(tool_name) else {
            return ToolOutcome::err(format!("unknown tool: {tool_name}"));
        };
        match tool.invoke(arguments).await {
            Ok(content) => ToolOutcome::ok(content),
            Err(e) => ToolOutcome::err(format!("tool error: {e}")),
        }
    }
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.tools.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Debug, Deserialize)]
struct SearchArgs {
    queries: Vec<String>,
}

struct SearchTool {
    provider: Arc<dyn SearchProvider>,
}

#[async_trait]
impl Tool for SearchTool {
    fn name(&self) -> &str {
        "search"
    }

    fn schema(&self) -> ToolSchema {
        ToolSchema {
            name: "search".into(),
            description: "Batched web search; returns the top ranked results per query.".into(),
            parameters: serde_json::json!({
                "type": "object",
                "properties": {
                    "queries": {"type": "array", "items": {"type": "string"}}
                },
                "required": ["queries"]
            }),
        }
    }

    async fn invoke(&self, arguments: &serde_json::Value) -> Result<String, BackendError> {
        let args: SearchArgs = serde_json::from_value(arguments.clone())
            .map_err(|e| BackendError::InvalidArgument(format!("search arguments: {e}")))?;
        validate_search_batch(&args.queries)?;
        let results = self.provider.search(&args.queries).await?;
        Ok(render_search_response(&args.queries, &results))
    }
}

#[derive(Debug, Deserialize)]
struct VisitArgs {
    urls: Vec<String>,
    goal: String,
}

struct VisitTool {
    provider: Arc<dyn VisitProvider>,
}

#[async_trait]
impl Tool for VisitTool {
    fn name(&self) -> &str {
        "visit"
    }

    fn schema(&self) -> ToolSchema {
        ToolSchema {
            name: "visit".into(),
            description: "Fetches webpages and extracts content relevant to the goal.".into(),
            parameters: serde_json::json!({
                "type": "object",
                "properties": {
                    "urls": {"type": "array", "items": {"type": "string"}},
                    "goal": {"type": "string"}
                },
                "required": ["urls", "goal"]
            }),
        }
    }

    async fn invoke(&self, arguments: &serde_json::Value) -> Result<String, BackendError> {
        let args: VisitArgs = serde_json::from_value(arguments.clone())
            .map_err(|e| BackendError::InvalidArgument(format!("visit arguments: {e}")))?;
        validate_visit_batch(&args.urls)?;
        let results = self.provider.visit(&args.urls, &args.goal).await?;
        Ok(render_visit_response(&results))
    }
}

/// Deterministic text rendering of search results, shared by the engine and
/// the scripted simulator's conversation replay.
pub fn render_search_response(queries: &[String], results: &[Vec<SearchResult>]) -> String {
    let mut out = String::new();
    for (query, hits) in queries.iter().zip(results.iter()) {
        out.push_str(&format!("Results for {query:?}:\n"));
        if hits.is_empty() {
            out.push_str("  (no results)\n");
        }
        for (rank, hit) in hits.iter().enumerate() {
            out.push_str(&format!("  {}. {} — {}\n     {}\n", rank + 1, hit.title, hit.url, hit.snippet));
        }
    }
    out
}

/// Deterministic text rendering of visit extractions.
pub fn render_visit_response(results: &[VisitResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!("URL: {}\n", r.url));
        match (&r.content, &r.error) {
            (Some(c), _) => out.push_str(&format!("{c}\n")),
            (None, Some(e)) => out.push_str(&format!("ERROR: {e}\n")),
            (None, None) => out.push_str("(empty)\n"),
        }
    }
    out
}

/// Caps a response at `cap` whitespace tokens, appending a marker when cut.
pub fn truncate_response(content: &str, cap: usize) -> String {
    let mut count = 0usize;
    let mut in_ws = true;
    for (i, ch) in content.char_indices() {
        if ch.is_whitespace() {
            in_ws = true;
        } else {
            if in_ws {
                count += 1;
                if count > cap {
                    let mut cut = content[..i].trim_end().to_string();
                    cut.push_str(TRUNCATION_MARKER);
                    return cut;
                }
            }
            in_ws = false;
        }
    }
    content.to_string()
}
