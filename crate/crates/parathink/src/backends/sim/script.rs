//! Authoring format for scripted scenarios.
//!
//! A scenario script is a tree of assistant turns per task plus tool
//! fixtures. The simulator compiles it by self-play: because tool results
//! and every continuation are scripted, all reachable conversations can be
//! enumerated up front and keyed by conversation hash. Rendering goes
//! through the same segmentation and conversation code the engine uses, so
//! compiled requests match engine requests exactly.

use crate::aggregate::{EntityGraph, ReportBody};
use crate::backends::{FinishReason, ModelResponse, Role, SearchResult};
use crate::model::segment::{ScoredToken, THINK_CLOSE, THINK_OPEN, TOOL_CLOSE, TOOL_OPEN};
use crate::model::AssistantStream;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const SCRIPT_SCHEMA_VERSION: u32 = 1;

/// One scripted token: text and logprob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSpec(pub String, pub f64);

impl TokenSpec {
    pub fn new(text: impl Into<String>, logprob: f64) -> Self {
        Self(text.into(), logprob)
    }
}

/// Chooses the next node for a conversation position given the request
/// seed: an exact seed entry wins, otherwise the `"*"` wildcard.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NextSel {
    #[serde(default)]
    pub seeds: BTreeMap<String, String>,
}

impl NextSel {
    pub fn wildcard(node: impl Into<String>) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("*".to_string(), node.into());
        Self { seeds }
    }

    pub fn with_seed(mut self, seed: i64, node: impl Into<String>) -> Self {
        self.seeds.insert(seed.to_string(), node.into());
        self
    }

    pub fn resolve(&self, seed: i64) -> Option<&str> {
        self.seeds
            .get(&seed.to_string())
            .or_else(|| self.seeds.get("*"))
            .map(String::as_str)
    }

    /// All node ids this selector can reach, deduplicated.
    pub fn children(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.seeds.values().map(String::as_str).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// What the assistant does at one scripted turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeAction {
    ToolCall {
        tool: String,
        arguments: serde_json::Value,
        /// Logprobs for the serialized call payload; the payload is split
        /// into this many token chunks. Empty uses a default density.
        #[serde(default)]
        payload_logprobs: Vec<f64>,
    },
    Final {
        /// Answer text emitted after the think segment; `None` emits
        /// nothing (the trajectory ends unanswered).
        #[serde(default)]
        answer: Option<String>,
        #[serde(default)]
        answer_logprobs: Vec<f64>,
    },
}

/// One scripted assistant turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptNode {
    #[serde(default)]
    pub think: Vec<TokenSpec>,
    pub action: NodeAction,
    /// Continuation selector; required for tool calls, absent for finals.
    #[serde(default)]
    pub next: Option<NextSel>,
    /// Canonical compressed report for trajectories ending at this node;
    /// auto-generated when absent.
    #[serde(default)]
    pub report: Option<ReportBody>,
    /// Canonical entity graph for trajectories ending at this node;
    /// a single effective answer vertex when absent.
    #[serde(default)]
    pub entity_graph: Option<EntityGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationFixture {
    pub answer: String,
    #[serde(default)]
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptTask {
    pub task_id: String,
    pub question: String,
    #[serde(default)]
    pub gold_answer: Option<String>,
    pub root: NextSel,
    pub nodes: BTreeMap<String, ScriptNode>,
    /// Reply returned for reasoning-guided aggregation over this task's
    /// reports; matched by candidate-answer set.
    #[serde(default)]
    pub aggregation: Option<AggregationFixture>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchFixture {
    pub query: String,
    pub results: Vec<SearchResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitFixture {
    pub url: String,
    pub goal: String,
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

/// A raw conversation -> reply entry, for requests outside the rollout tree
/// (for example compression repair exchanges).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatFixture {
    pub messages: Vec<FixtureMessage>,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureMessage {
    pub role: Role,
    pub content: String,
}

/// A complete scripted scenario: tasks, tool fixtures, and per-token costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub schema: u32,
    pub scenario_id: String,
    #[serde(default = "default_cost")]
    pub hot_cost_per_token: f64,
    #[serde(default = "default_cost")]
    pub cold_cost_per_token: f64,
    /// Tool responses longer than this are truncated at this cap; the
    /// engine must run with the same cap for conversations to line up.
    #[serde(default = "default_response_cap")]
    pub tool_response_token_cap: usize,
    pub tasks: Vec<ScriptTask>,
    #[serde(default)]
    pub search: Vec<SearchFixture>,
    #[serde(default)]
    pub visit: Vec<VisitFixture>,
    #[serde(default)]
    pub chat: Vec<ChatFixture>,
}

fn default_cost() -> f64 {
    1.0
}

fn default_response_cap() -> usize {
    4096
}

impl ScenarioScript {
    pub fn new(scenario_id: impl Into<String>) -> Self {
        Self {
            schema: SCRIPT_SCHEMA_VERSION,
            scenario_id: scenario_id.into(),
            hot_cost_per_token: 1.0,
            cold_cost_per_token: 1.0,
            tool_response_token_cap: 4096,
            tasks: Vec::new(),
            search: Vec::new(),
            visit: Vec::new(),
            chat: Vec::new(),
        }
    }
}

/// Splits `text` into `n` near-equal chunks on char boundaries; the chunks
/// concatenate back to `text` exactly.
pub fn chunk_text(text: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let n = n.clamp(1, chars.len().max(1));
    let base = chars.len() / n;
    let extra = chars.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut pos = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        out.push(chars[pos..pos + len].iter().collect());
        pos += len;
    }
    out
}

/// Splits text at whitespace boundaries so that the pieces concatenate back
/// exactly (whitespace stays attached to the following word).
pub fn lossless_chunks(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut prev_ws = false;
    for ch in text.chars() {
        if !ch.is_whitespace() && prev_ws && !current.trim().is_empty() {
            out.push(std::mem::take(&mut current));
        }
        current.push(ch);
        prev_ws = ch.is_whitespace();
    }
    if !current.is_empty() {
        out.push(current);
    }
    if out.is_empty() {
        out.push(String::new());
    }
    out
}

fn cycle(logprobs: &[f64], default: f64, i: usize) -> f64 {
    if logprobs.is_empty() {
        default
    } else {
        logprobs[i % logprobs.len()]
    }
}

/// Renders one scripted node as the assistant turn the simulator returns:
/// a marker-structured token stream.
pub fn render_node(node: &ScriptNode) -> ModelResponse {
    let mut tokens = vec![ScoredToken::new(THINK_OPEN, 0.0)];
    for TokenSpec(text, lp) in &node.think {
        tokens.push(ScoredToken::new(text.clone(), *lp));
    }
    tokens.push(ScoredToken::new(THINK_CLOSE, 0.0));

    let finish_reason = match &node.action {
        NodeAction::ToolCall { tool, arguments, payload_logprobs } => {
            let payload = serde_json::json!({"name": tool, "arguments": arguments}).to_string();
            let n = if payload_logprobs.is_empty() {
                payload.chars().count().div_ceil(6).max(1)
            } else {
                payload_logprobs.len()
            };
            tokens.push(ScoredToken::new(TOOL_OPEN, 0.0));
            for (i, chunk) in chunk_text(&payload, n).into_iter().enumerate() {
                tokens.push(ScoredToken::new(chunk, cycle(payload_logprobs, -0.05, i)));
            }
            tokens.push(ScoredToken::new(TOOL_CLOSE, 0.0));
            FinishReason::ToolCall
        }
        NodeAction::Final { answer, answer_logprobs } => {
            if let Some(answer) = answer {
                for (i, chunk) in lossless_chunks(&format!(" {answer}")).into_iter().enumerate() {
                    tokens.push(ScoredToken::new(chunk, cycle(answer_logprobs, -0.02, i)));
                }
            }
            FinishReason::Terminal
        }
    };
    ModelResponse { stream: AssistantStream { tokens, structured_calls: vec![] }, finish_reason }
}

/// Renders a plain-text reply (reports, verdicts) as a token stream whose
/// content round-trips exactly.
pub fn render_text_reply(text: &str) -> ModelResponse {
    let tokens = lossless_chunks(text)
        .into_iter()
        .map(|chunk| ScoredToken::new(chunk, 0.0))
        .collect();
    ModelResponse {
        stream: AssistantStream { tokens, structured_calls: vec![] },
        finish_reason: FinishReason::Terminal,
    }
}
