//! Trajectory data model: region-tagged tokens, steps, trajectories, and the
//! run configuration shared by every other module.

pub mod segment;

pub use segment::{
    extract_final_answer, segment_step, AssistantStream, ScoredToken, SegmentError, StructuredCall,
};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Schema version written on every persisted trajectory line.
pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

/// Functional region of a model-generated token.
///
/// Reasoning tokens live in the think segment (plus any free text such as a
/// final answer); exploration tokens are the serialized tool call. Tool
/// responses are not model-generated and carry no tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionTag {
    Reasoning,
    Exploration,
}

impl fmt::Display for RegionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionTag::Reasoning => write!(f, "reasoning"),
            RegionTag::Exploration => write!(f, "exploration"),
        }
    }
}

/// One model-generated token with its natural-log probability and region tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Natural-log probability, always <= 0 for a well-formed backend.
    pub logprob: f64,
    pub region: RegionTag,
}

impl Token {
    pub fn new(text: impl Into<String>, logprob: f64, region: RegionTag) -> Self {
        Self { text: text.into(), logprob, region }
    }
}

/// A tool invocation emitted by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    /// Structured argument payload as parsed from the call serialization.
    pub arguments: serde_json::Value,
    /// The tokens that serialized this call, all tagged Exploration.
    pub raw_tokens: Vec<Token>,
}

/// The environment's reply to a tool call. Response text is prompt-side
/// content and is never counted as generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub content: String,
    /// Backend-reported tokenized length of `content`.
    pub token_count: usize,
    pub error_flag: bool,
}

/// One think -> tool-call -> response cycle. A terminal step has no tool
/// call and closes the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub reasoning_tokens: Vec<Token>,
    pub tool_call: Option<ToolCall>,
    pub tool_response: Option<ToolResponse>,
    pub is_terminal: bool,
}

impl Step {
    /// Model-generated tokens of this step (reasoning plus call serialization).
    pub fn generated_token_count(&self) -> usize {
        self.reasoning_tokens.len()
            + self.tool_call.as_ref().map_or(0, |c| c.raw_tokens.len())
    }

    /// Tokens of the requested region, in emission order.
    pub fn region_tokens(&self, region: RegionTag) -> &[Token] {
        match region {
            RegionTag::Reasoning => &self.reasoning_tokens,
            RegionTag::Exploration => {
                self.tool_call.as_ref().map_or(&[][..], |c| &c.raw_tokens[..])
            }
        }
    }
}

/// How a trajectory came to exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    FromScratch,
    Branch { parent_id: String, branch_step_index: usize },
}

/// A complete (or budget-capped) interaction record: the unit of rollout,
/// compression, and voting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema: u32,
    pub id: String,
    pub task_id: String,
    pub origin: Origin,
    pub steps: Vec<Step>,
    pub final_answer: Option<String>,
    pub generated_token_count: usize,
    pub prompt_token_count: usize,
    pub sampling_seed: i64,
}

impl Trajectory {
    /// True when the rollout produced a terminal step with an answer.
    pub fn answered(&self) -> bool {
        self.final_answer.is_some()
    }

    /// Number of steps that carry a tool call (environment interactions).
    pub fn tool_call_count(&self) -> usize {
        self.steps.iter().filter(|s| s.tool_call.is_some()).count()
    }

    /// Generated plus prompt-side tokens: the full context footprint.
    pub fn context_token_count(&self) -> usize {
        self.generated_token_count + self.prompt_token_count
    }

    /// All model-generated tokens in emission order.
    pub fn generated_tokens(&self) -> impl Iterator<Item = &Token> {
        self.steps.iter().flat_map(|s| {
            s.reasoning_tokens
                .iter()
                .chain(s.tool_call.iter().flat_map(|c| c.raw_tokens.iter()))
        })
    }
}

/// Region-selection strategy for branching-step identification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionStrategy {
    Reasoning,
    Exploration,
    /// Alternate picks between the two regional rankings, reasoning first.
    Mixed,
}

/// Sampler and budget configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Overall sampling budget N.
    pub sampling_budget_n: usize,
    /// Number of from-scratch rollouts M.
    pub initial_rollouts_m: usize,
    /// Branching PPL top-K.
    pub branch_top_k: usize,
    /// Branching times per selected step.
    pub branches_per_step: usize,
    pub region_strategy: RegionStrategy,
    pub max_steps: usize,
    pub max_generated_tokens: usize,
    pub parallelism_p: usize,
    pub temperature: f64,
    /// Identifier of the backend used for compression/aggregation; may
    /// differ from the rollout backend.
    pub aggregation_backend: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sampling_budget_n: 8,
            initial_rollouts_m: 1,
            branch_top_k: 2,
            branches_per_step: 3,
            region_strategy: RegionStrategy::Exploration,
            max_steps: 50,
            max_generated_tokens: 65_536,
            parallelism_p: 4,
            temperature: 0.7,
            aggregation_backend: "default".to_string(),
        }
    }
}

impl RunConfig {
    /// Basic sanity checks; returns a message for the first violated rule.
    pub fn validate(&self) -> Result<(), String> {
        if self.sampling_budget_n == 0 {
            return Err("sampling_budget_n must be positive".into());
        }
        if self.initial_rollouts_m == 0 {
            return Err("initial_rollouts_m must be positive".into());
        }
        if self.initial_rollouts_m > self.sampling_budget_n {
            return Err("initial_rollouts_m must not exceed sampling_budget_n".into());
        }
        if self.branch_top_k == 0 {
            return Err("branch_top_k must be at least 1".into());
        }
        if self.branches_per_step == 0 {
            return Err("branches_per_step must be at least 1".into());
        }
        if self.parallelism_p == 0 {
            return Err("parallelism_p must be at least 1".into());
        }
        if self.max_steps == 0 || self.max_generated_tokens == 0 {
            return Err("max_steps and max_generated_tokens must be positive".into());
        }
        if self.temperature < 0.0 {
            return Err("temperature must be non-negative".into());
        }
        Ok(())
    }
}

/// One violated invariant found by [`validate_trajectory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// Step the violation was found at, when step-local.
    pub step_index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step_index {
            Some(i) => write!(f, "step {}: {}", i, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Checks every step-local and trajectory-level invariant, returning one
/// diagnostic per violation. An empty list means the trajectory is
/// well-formed. Parent-relative origin validity needs the parent and is
/// enforced at branch time instead.
pub fn validate_trajectory(traj: &Trajectory) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<Diagnostic>, step: Option<usize>, msg: String| {
        out.push(Diagnostic { step_index: step, message: msg });
    };

    let mut step_sum = 0usize;
    let last = traj.steps.len().saturating_sub(1);
    for (pos, step) in traj.steps.iter().enumerate() {
        if step.index != pos {
            push(&mut out, Some(pos), format!("step index {} does not match position {pos}", step.index));
        }
        if step.is_terminal != step.tool_call.is_none() {
            push(&mut out, Some(pos), "is_terminal must hold exactly when tool_call is absent".into());
        }
        if step.tool_response.is_some() != step.tool_call.is_some() {
            push(&mut out, Some(pos), "tool_response present must match tool_call present".into());
        }
        if step.is_terminal && pos != last {
            push(&mut out, Some(pos), "terminal step before the last step".into());
        }
        for tok in &step.reasoning_tokens {
            if tok.region != RegionTag::Reasoning {
                push(&mut out, Some(pos), format!("reasoning token {:?} tagged {}", tok.text, tok.region));
            }
            if tok.logprob > 0.0 {
                push(&mut out, Some(pos), format!("token {:?} has positive logprob {}", tok.text, tok.logprob));
            }
        }
        if let Some(call) = &step.tool_call {
            if call.tool_name.is_empty() {
                push(&mut out, Some(pos), "tool call with empty tool name".into());
            }
            if !call.arguments.is_object() {
                push(&mut out, Some(pos), "tool call arguments are not a structured object".into());
            }
            for tok in &call.raw_tokens {
                if tok.region != RegionTag::Exploration {
                    push(&mut out, Some(pos), format!("call token {:?} tagged {}", tok.text, tok.region));
                }
                if tok.logprob > 0.0 {
                    push(&mut out, Some(pos), format!("token {:?} has positive logprob {}", tok.text, tok.logprob));
                }
            }
        }
        step_sum += step.generated_token_count();
    }

    if traj.generated_token_count != step_sum {
        push(
            &mut out,
            None,
            format!(
                "generated_token_count {} does not equal per-step sum {step_sum}",
                traj.generated_token_count
            ),
        );
    }
    if traj.final_answer.is_some() && !traj.steps.last().is_some_and(|s| s.is_terminal) {
        push(&mut out, None, "final_answer set without a terminal last step".into());
    }
    if traj.schema != TRAJECTORY_SCHEMA_VERSION {
        push(&mut out, None, format!("unknown schema version {}", traj.schema));
    }
    out
}

/// Serializes trajectories as JSONL, one object per line, sorted by id.
pub fn to_jsonl(trajectories: &[Trajectory]) -> Result<String, serde_json::Error> {
    let mut sorted: Vec<&Trajectory> = trajectories.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = String::new();
    for t in sorted {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a JSONL document of trajectories.
pub fn from_jsonl(text: &str) -> Result<Vec<Trajectory>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
