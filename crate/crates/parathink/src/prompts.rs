//! Prompt templates and the deterministic text renderings that feed them.
//!
//! Templates ship as versioned assets and can be overridden per run. The
//! renderings are content-only (no trajectory ids or seeds), so a scripted
//! scenario can precompute every request its script can produce.

use crate::aggregate::Report;
use crate::backends::ChatMessage;
use crate::model::Step;

pub const COMPRESS_TEMPLATE: &str = include_str!("../assets/compress.txt");
pub const COMPRESS_REPAIR_TEMPLATE: &str = include_str!("../assets/compress_repair.txt");
pub const AGGREGATE_TEMPLATE: &str = include_str!("../assets/aggregate.txt");
pub const EXTRACT_ENTITIES_TEMPLATE: &str = include_str!("../assets/extract_entities.txt");
pub const VISIT_EXTRACT_TEMPLATE: &str = include_str!("../assets/visit_extract.txt");

/// The prompt assets in force for a run. Defaults to the shipped templates.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub compress: String,
    pub compress_repair: String,
    pub aggregate: String,
    pub extract_entities: String,
    pub visit_extract: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            compress: COMPRESS_TEMPLATE.to_string(),
            compress_repair: COMPRESS_REPAIR_TEMPLATE.to_string(),
            aggregate: AGGREGATE_TEMPLATE.to_string(),
            extract_entities: EXTRACT_ENTITIES_TEMPLATE.to_string(),
            visit_extract: VISIT_EXTRACT_TEMPLATE.to_string(),
        }
    }
}

/// Plain-text transcript of a trajectory's steps and answer.
pub fn render_transcript(steps: &[Step], final_answer: Option<&str>) -> String {
    let mut out = String::from("Transcript:\n");
    for step in steps {
        let think: String = step.reasoning_tokens.iter().map(|t| t.text.as_str()).collect();
        out.push_str(&format!("[step {} think] {}\n", step.index, think.trim()));
        if let Some(call) = &step.tool_call {
            out.push_str(&format!(
                "[step {} call] {} {}\n",
                step.index, call.tool_name, call.arguments
            ));
        }
        if let Some(resp) = &step.tool_response {
            let tag = if resp.error_flag { " (error)" } else { "" };
            out.push_str(&format!("[step {} response{tag}] {}\n", step.index, resp.content));
        }
    }
    out.push_str(&format!("Final answer: {}\n", final_answer.unwrap_or("(none)")));
    out
}

/// Compression request for one trajectory's content.
pub fn compression_messages(
    prompts: &PromptSet,
    steps: &[Step],
    final_answer: Option<&str>,
) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(prompts.compress.clone()),
        ChatMessage::user(render_transcript(steps, final_answer)),
    ]
}

/// Repair request after an invalid compression output: the original
/// exchange, the rejected output, and the reason.
pub fn compression_repair_messages(
    prompts: &PromptSet,
    original: &[ChatMessage],
    previous_output: &str,
    reason: &str,
) -> Vec<ChatMessage> {
    let mut messages = original.to_vec();
    messages.push(ChatMessage::assistant(previous_output.to_string()));
    messages.push(ChatMessage::user(
        prompts
            .compress_repair
            .replace("{reason}", reason)
            .replace("{previous}", previous_output),
    ));
    messages
}

/// One numbered block per report, in the given order.
pub fn render_reports(reports: &[Report]) -> String {
    let mut out = String::new();
    for (i, r) in reports.iter().enumerate() {
        out.push_str(&format!("## Report {}\n", i + 1));
        if r.degraded {
            out.push_str("(degraded report)\n");
        }
        out.push_str(&format!("Planning: {}\n", r.solution_planning));
        out.push_str("Methods:\n");
        for m in &r.solution_methods {
            out.push_str(&format!(
                "- {} [tool {}, parameters {}] => {}\n",
                m.subproblem, m.tool, m.parameters, m.subanswer
            ));
        }
        out.push_str(&format!("Final reasoning: {}\n", r.final_reasoning));
        out.push_str(&format!("Candidate answer: {}\n\n", r.candidate_answer));
    }
    out
}

/// Aggregation request over the rendered reports.
pub fn aggregation_messages(prompts: &PromptSet, reports: &[Report]) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(prompts.aggregate.clone()),
        ChatMessage::user(render_reports(reports)),
    ]
}

/// Entity-extraction request for one trajectory's content.
pub fn extraction_messages(
    prompts: &PromptSet,
    steps: &[Step],
    final_answer: Option<&str>,
    target_answer: &str,
) -> Vec<ChatMessage> {
    let mut body = render_transcript(steps, final_answer);
    body.push_str(&format!("Derivation target answer: {target_answer}\n"));
    vec![
        ChatMessage::system(prompts.extract_entities.clone()),
        ChatMessage::user(body),
    ]
}
