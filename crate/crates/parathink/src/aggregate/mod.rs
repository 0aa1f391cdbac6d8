//! Stage two: structured report compression, entity-graph redundancy,
//! reasoning-guided aggregation, and the answer-selection baselines.

mod graph;
mod voting;

pub use graph::{extract_entity_graph, redundancy_ratio, EntityGraph, Relation};
pub use voting::{
    canonicalize_answer, majority_vote, max_tool_call_select, vote_over_trajectories, weighted_vote,
    VoteMethod,
};

use crate::backends::conversation::canonical_text;
use crate::backends::{BackendError, ModelBackend, ModelRequest, TokenCounter};
use crate::model::Trajectory;
use crate::prompts::{
    aggregation_messages, compression_messages, compression_repair_messages, render_reports,
    PromptSet,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("reports exceed the aggregation context budget ({tokens} tokens > {budget}) after trimming")]
    ContextOverflow { tokens: usize, budget: usize },
    #[error("answers ({answers}) and confidences ({confidences}) differ in length")]
    LengthMismatch { answers: usize, confidences: usize },
    #[error("no trajectory carries a final answer")]
    NoAnswers,
    #[error("entity graph has no vertices")]
    EmptyGraph,
    #[error("at least one report is required")]
    NoReports,
}

/// One solved subproblem inside a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionMethod {
    pub subproblem: String,
    pub tool: String,
    pub parameters: serde_json::Value,
    pub subanswer: String,
}

/// Structured compression of one trajectory: planning, methods, final
/// reasoning, and the candidate answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub trajectory_id: String,
    pub solution_planning: String,
    pub solution_methods: Vec<SolutionMethod>,
    pub final_reasoning: String,
    pub candidate_answer: String,
    pub compressed_token_count: usize,
    pub degraded: bool,
}

/// The backend-facing report schema (everything except bookkeeping).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBody {
    pub solution_planning: String,
    #[serde(default)]
    pub solution_methods: Vec<SolutionMethod>,
    pub final_reasoning: String,
    pub candidate_answer: String,
}

impl Report {
    fn from_body(trajectory_id: &str, body: ReportBody, degraded: bool, counter: &dyn TokenCounter) -> Self {
        let mut report = Report {
            trajectory_id: trajectory_id.to_string(),
            solution_planning: body.solution_planning,
            solution_methods: body.solution_methods,
            final_reasoning: body.final_reasoning,
            candidate_answer: body.candidate_answer,
            compressed_token_count: 0,
            degraded,
        };
        report.compressed_token_count = counter.count_tokens(&render_reports(std::slice::from_ref(&report)));
        report
    }
}

/// How a final answer was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Aggregation,
    MajorityVote,
    WeightedVote,
    MaxToolCall,
}

/// A single selected answer: one value, never a concatenation of
/// alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub answer: String,
    pub justification: String,
    pub method: SelectionMethod,
    pub inputs_used: Vec<String>,
}

/// Knobs for compression and aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// Raw tool-response text longer than this may not survive compression.
    pub snippet_token_cap: usize,
    /// Repair attempts after an invalid compression output.
    pub max_repairs: usize,
    /// Token budget for the combined serialized reports.
    pub aggregation_context_budget: usize,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self { snippet_token_cap: 256, max_repairs: 3, aggregation_context_budget: 24_000 }
    }
}

fn non_tool_request(messages: Vec<crate::backends::ChatMessage>) -> ModelRequest {
    ModelRequest {
        messages,
        tool_schemas: Vec::new(),
        temperature: 0.0,
        seed: 0,
        logprobs_required: false,
        max_tokens: 8192,
    }
}

fn validate_report_body(
    body: &ReportBody,
    traj: &Trajectory,
    opts: &AggregateOptions,
    counter: &dyn TokenCounter,
) -> Result<(), String> {
    if body.candidate_answer.trim().is_empty() {
        return Err("candidate_answer is empty".into());
    }
    if let Some(answer) = &traj.final_answer {
        if body.candidate_answer != *answer {
            return Err(format!(
                "candidate_answer {:?} does not equal the trajectory answer {:?}",
                body.candidate_answer, answer
            ));
        }
    }
    // No raw tool-response text longer than a snippet may survive.
    let serialized = canonical_text(&serde_json::to_string(body).unwrap_or_default());
    for step in &traj.steps {
        if let Some(resp) = &step.tool_response {
            if counter.count_tokens(&resp.content) > opts.snippet_token_cap
                && serialized.contains(&canonical_text(&resp.content))
            {
                return Err(format!(
                    "report copies the raw tool response of step {} verbatim",
                    step.index
                ));
            }
        }
    }
    Ok(())
}

fn degraded_report(traj: &Trajectory, counter: &dyn TokenCounter) -> Report {
    let last_think = traj
        .steps
        .last()
        .map(|s| {
            s.reasoning_tokens
                .iter()
                .map(|t| t.text.as_str())
                .collect::<String>()
                .trim()
                .to_string()
        })
        .unwrap_or_default();
    Report::from_body(
        &traj.id,
        ReportBody {
            solution_planning: String::new(),
            solution_methods: Vec::new(),
            final_reasoning: last_think,
            candidate_answer: traj.final_answer.clone().unwrap_or_default(),
        },
        true,
        counter,
    )
}

/// Compresses one trajectory into a structured [`Report`] with a single
/// backend call, retrying with a repair prompt on schema violations and
/// falling back to a degraded report (last reasoning step plus answer) when
/// repairs run out. Budget-exhausted trajectories degrade immediately
/// without a backend call.
pub async fn compress_trajectory(
    traj: &Trajectory,
    backend: &dyn ModelBackend,
    prompts: &PromptSet,
    opts: &AggregateOptions,
) -> Result<Report, AggregateError> {
    if traj.final_answer.is_none() {
        return Ok(degraded_report(traj, backend));
    }
    let original = compression_messages(prompts, &traj.steps, traj.final_answer.as_deref());
    let mut messages = original.clone();
    for attempt in 0..=opts.max_repairs {
        let resp = backend.chat_generate(non_tool_request(messages.clone())).await?;
        let content = resp.stream.content();
        let outcome = serde_json::from_str::<ReportBody>(content.trim())
            .map_err(|e| format!("output is not a valid report object: {e}"))
            .and_then(|body| {
                validate_report_body(&body, traj, opts, backend).map(|()| body)
            });
        match outcome {
            Ok(body) => return Ok(Report::from_body(&traj.id, body, false, backend)),
            Err(reason) if attempt < opts.max_repairs => {
                tracing::debug!(trajectory = %traj.id, attempt, %reason, "compression output rejected");
                messages = compression_repair_messages(prompts, &original, &content, &reason);
            }
            Err(reason) => {
                tracing::warn!(trajectory = %traj.id, %reason, "compression degraded after repairs");
                return Ok(degraded_report(traj, backend));
            }
        }
    }
    unreachable!("compression attempt loop always returns");
}

fn truncate_words(text: &str, cap: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= cap {
        return text.to_string();
    }
    let mut out = words[..cap].join(" ");
    out.push('…');
    out
}

/// Trims reports until their combined rendering fits the budget. Trim order
/// per report: tool parameters, then subanswer snippets, then planning
/// prose; the candidate answer and final reasoning are never touched.
fn fit_reports_to_budget(
    mut reports: Vec<Report>,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<Vec<Report>, AggregateError> {
    let mut stages = vec![0u8; reports.len()];
    loop {
        let tokens = counter.count_tokens(&render_reports(&reports));
        if tokens <= budget {
            return Ok(reports);
        }
        // Trim the longest still-trimmable report one stage further.
        let target = reports
            .iter()
            .enumerate()
            .filter(|(i, _)| stages[*i] < 3)
            .max_by_key(|(i, r)| {
                (counter.count_tokens(&render_reports(std::slice::from_ref(r))), usize::MAX - i)
            })
            .map(|(i, _)| i);
        let Some(i) = target else {
            return Err(AggregateError::ContextOverflow { tokens, budget });
        };
        stages[i] += 1;
        let r = &mut reports[i];
        match stages[i] {
            1 => {
                for m in &mut r.solution_methods {
                    m.parameters = serde_json::json!({});
                }
            }
            2 => {
                for m in &mut r.solution_methods {
                    m.subanswer = truncate_words(&m.subanswer, 16);
                }
            }
            _ => r.solution_planning = truncate_words(&r.solution_planning, 16),
        }
    }
}

#[derive(Debug, Deserialize)]
struct AggregationVerdict {
    answer: String,
    #[serde(default)]
    justification: String,
}

/// Synthesizes one final answer from the compressed reports with a single
/// backend call. The request carries an empty tool registry, so tool calls
/// are structurally impossible, and the instruction contract forbids
/// frequency-based selection and answer enumeration. The aggregation
/// backend may differ from the rollout backend.
pub async fn aggregate_reports(
    reports: &[Report],
    backend: &dyn ModelBackend,
    prompts: &PromptSet,
    opts: &AggregateOptions,
) -> Result<FinalAnswer, AggregateError> {
    if reports.is_empty() {
        return Err(AggregateError::NoReports);
    }
    let mut sorted: Vec<Report> = reports.to_vec();
    sorted.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
    let inputs_used: Vec<String> = sorted.iter().map(|r| r.trajectory_id.clone()).collect();

    if sorted.len() == 1 {
        return Ok(FinalAnswer {
            answer: sorted[0].candidate_answer.clone(),
            justification: "single candidate report".into(),
            method: SelectionMethod::Aggregation,
            inputs_used,
        });
    }
    if sorted.iter().all(|r| r.degraded) {
        tracing::warn!("every report is degraded; aggregating anyway");
    }

    let fitted = fit_reports_to_budget(sorted, opts.aggregation_context_budget, backend)?;
    let request = non_tool_request(aggregation_messages(prompts, &fitted));
    debug_assert!(request.tool_schemas.is_empty());
    let resp = backend.chat_generate(request).await?;
    let content = resp.stream.content();
    let verdict: AggregationVerdict = serde_json::from_str(content.trim()).map_err(|e| {
        BackendError::Protocol(format!("aggregation output is not a valid verdict object: {e}"))
    })?;
    if verdict.answer.trim().is_empty() {
        return Err(AggregateError::Backend(BackendError::Protocol(
            "aggregation returned an empty answer".into(),
        )));
    }
    Ok(FinalAnswer {
        answer: verdict.answer,
        justification: verdict.justification,
        method: SelectionMethod::Aggregation,
        inputs_used,
    })
}

/// Serializes reports as JSONL, one object per line, sorted by trajectory id.
pub fn reports_to_jsonl(reports: &[Report]) -> Result<String, serde_json::Error> {
    let mut sorted: Vec<&Report> = reports.iter().collect();
    sorted.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
    let mut out = String::new();
    for r in sorted {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a JSONL document of reports.
pub fn reports_from_jsonl(text: &str) -> Result<Vec<Report>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
