//! Partitioning of raw assistant output into region-tagged steps.
//!
//! Agent models delimit functional segments with special tokens
//! (`<think>`, `<tool_call>`); wire protocols that hide the markers return
//! a structured call with its own token-aligned logprob list instead. Both
//! forms reduce to the same [`Step`] shape here.

use super::{RegionTag, Step, Token, ToolCall};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const TOOL_OPEN: &str = "<tool_call>";
pub const TOOL_CLOSE: &str = "</tool_call>";

/// A backend token before region tagging. The logprob is optional only so
/// that protocol gaps can be detected and reported; rollout requires it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub text: String,
    pub logprob: Option<f64>,
}

impl ScoredToken {
    pub fn new(text: impl Into<String>, logprob: f64) -> Self {
        Self { text: text.into(), logprob: Some(logprob) }
    }
}

/// A tool call delivered structurally by the wire protocol, with the tokens
/// that serialize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredCall {
    pub tool_name: String,
    pub arguments: serde_json::Value,
    pub argument_tokens: Vec<ScoredToken>,
}

/// One assistant turn as produced by a backend: a marker-structured token
/// stream, or plain tokens plus structured calls.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssistantStream {
    pub tokens: Vec<ScoredToken>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub structured_calls: Vec<StructuredCall>,
}

impl AssistantStream {
    /// The verbatim assistant message content (token texts concatenated).
    pub fn content(&self) -> String {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentError {
    #[error("malformed assistant stream: {0}")]
    MalformedMarkers(String),
    #[error("token {index} ({text:?}) lacks a logprob")]
    MissingLogprobs { index: usize, text: String },
}

fn is_marker(text: &str) -> Option<&'static str> {
    match text.trim() {
        THINK_OPEN => Some(THINK_OPEN),
        THINK_CLOSE => Some(THINK_CLOSE),
        TOOL_OPEN => Some(TOOL_OPEN),
        TOOL_CLOSE => Some(TOOL_CLOSE),
        _ => None,
    }
}

/// Where a content token sits relative to the marker structure.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Zone {
    /// Outside any marked segment; before the think block or after it.
    Free { after_think: bool },
    Think,
    Tool,
}

struct ParsedStream {
    reasoning: Vec<Token>,
    answer_text: String,
    call: Option<ToolCall>,
}

fn require_logprob(index: usize, tok: &ScoredToken) -> Result<f64, SegmentError> {
    tok.logprob.ok_or_else(|| SegmentError::MissingLogprobs { index, text: tok.text.clone() })
}

fn parse_call_payload(payload: &str) -> Result<(String, serde_json::Value), SegmentError> {
    let value: serde_json::Value = serde_json::from_str(payload.trim()).map_err(|e| {
        SegmentError::MalformedMarkers(format!("tool-call payload is not valid JSON: {e}"))
    })?;
    let obj = value.as_object().ok_or_else(|| {
        SegmentError::MalformedMarkers("tool-call payload is not a JSON object".into())
    })?;
    let name = obj
        .get("name")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    if name.is_empty() {
        return Err(SegmentError::MalformedMarkers("tool-call payload lacks a name".into()));
    }
    let arguments = match obj.get("arguments") {
        None => serde_json::Value::Object(Default::default()),
        Some(v) if v.is_object() => v.clone(),
        Some(_) => {
            return Err(SegmentError::MalformedMarkers(
                "tool-call arguments are not a structured object".into(),
            ))
        }
    };
    Ok((name, arguments))
}

fn parse_marked(stream: &AssistantStream) -> Result<ParsedStream, SegmentError> {
    let mut zone = Zone::Free { after_think: false };
    let mut think_seen = false;
    let mut tool_seen = false;
    let mut tool_closed = false;
    let mut reasoning = Vec::new();
    let mut answer_text = String::new();
    let mut call_tokens: Vec<Token> = Vec::new();
    let mut call_payload = String::new();

    for (i, raw) in stream.tokens.iter().enumerate() {
        let lp = require_logprob(i, raw)?;
        if let Some(marker) = is_marker(&raw.text) {
            match (marker, zone) {
                (THINK_OPEN, Zone::Free { after_think: false }) if !think_seen => {
                    think_seen = true;
                    zone = Zone::Think;
                }
                (THINK_CLOSE, Zone::Think) => zone = Zone::Free { after_think: true },
                (TOOL_OPEN, Zone::Free { .. }) if !tool_seen => {
                    tool_seen = true;
                    zone = Zone::Tool;
                }
                (TOOL_CLOSE, Zone::Tool) => {
                    tool_closed = true;
                    zone = Zone::Free { after_think: true };
                }
                (m, _) => {
                    return Err(SegmentError::MalformedMarkers(format!(
                        "unexpected {m} at token {i}"
                    )))
                }
            }
            continue;
        }
        match zone {
            Zone::Think => reasoning.push(Token::new(&raw.text, lp, RegionTag::Reasoning)),
            Zone::Tool => {
                call_payload.push_str(&raw.text);
                call_tokens.push(Token::new(&raw.text, lp, RegionTag::Exploration));
            }
            Zone::Free { after_think } => {
                if tool_closed && !raw.text.trim().is_empty() {
                    return Err(SegmentError::MalformedMarkers(format!(
                        "content after {TOOL_CLOSE} at token {i}"
                    )));
                }
                if after_think && !tool_seen {
                    answer_text.push_str(&raw.text);
                } else if !think_seen {
                    // Stream with no think markers at all: everything free is
                    // reasoning-and-answer text.
                    answer_text.push_str(&raw.text);
                }
                reasoning.push(Token::new(&raw.text, lp, RegionTag::Reasoning));
            }
        }
    }
    match zone {
        Zone::Think => return Err(SegmentError::MalformedMarkers("unclosed <think>".into())),
        Zone::Tool => return Err(SegmentError::MalformedMarkers("unclosed <tool_call>".into())),
        Zone::Free { .. } => {}
    }

    let call = if tool_seen {
        let (name, arguments) = parse_call_payload(&call_payload)?;
        Some(ToolCall { tool_name: name, arguments, raw_tokens: call_tokens })
    } else {
        None
    };
    Ok(ParsedStream { reasoning, answer_text, call })
}

fn parse_structured(stream: &AssistantStream) -> Result<ParsedStream, SegmentError> {
    if stream.structured_calls.len() > 1 {
        return Err(SegmentError::MalformedMarkers(format!(
            "{} tool calls in one step; the loop permits one",
            stream.structured_calls.len()
        )));
    }
    let mut reasoning = Vec::new();
    for (i, raw) in stream.tokens.iter().enumerate() {
        let lp = require_logprob(i, raw)?;
        reasoning.push(Token::new(&raw.text, lp, RegionTag::Reasoning));
    }
    let sc = &stream.structured_calls[0];
    if sc.tool_name.is_empty() {
        return Err(SegmentError::MalformedMarkers("structured call lacks a tool name".into()));
    }
    if !sc.arguments.is_object() {
        return Err(SegmentError::MalformedMarkers(
            "structured call arguments are not a structured object".into(),
        ));
    }
    let mut raw_tokens = Vec::new();
    for (i, raw) in sc.argument_tokens.iter().enumerate() {
        let lp = require_logprob(stream.tokens.len() + i, raw)?;
        raw_tokens.push(Token::new(&raw.text, lp, RegionTag::Exploration));
    }
    Ok(ParsedStream {
        reasoning,
        answer_text: String::new(),
        call: Some(ToolCall {
            tool_name: sc.tool_name.clone(),
            arguments: sc.arguments.clone(),
            raw_tokens,
        }),
    })
}

fn parse(stream: &AssistantStream) -> Result<ParsedStream, SegmentError> {
    if stream.structured_calls.is_empty() {
        parse_marked(stream)
    } else {
        parse_structured(stream)
    }
}

/// Partitions one assistant turn into a [`Step`]: think-segment tokens (and
/// any free text) become Reasoning, tool-call serialization becomes
/// Exploration, token order preserved. A stream with no tool call yields a
/// terminal step. Deterministic: identical streams yield identical steps.
pub fn segment_step(stream: &AssistantStream, index: usize) -> Result<Step, SegmentError> {
    let parsed = parse(stream)?;
    let is_terminal = parsed.call.is_none();
    Ok(Step {
        index,
        reasoning_tokens: parsed.reasoning,
        tool_call: parsed.call,
        tool_response: None,
        is_terminal,
    })
}

/// The answer text of a terminal stream: free tokens after the think
/// segment, trimmed. `None` for non-terminal streams or when no answer text
/// was emitted.
pub fn extract_final_answer(stream: &AssistantStream) -> Result<Option<String>, SegmentError> {
    let parsed = parse(stream)?;
    if parsed.call.is_some() {
        return Ok(None);
    }
    let answer = parsed.answer_text.trim().to_string();
    Ok(if answer.is_empty() { None } else { Some(answer) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(texts: &[&str]) -> Vec<ScoredToken> {
        texts.iter().map(|t| ScoredToken::new(*t, -0.1)).collect()
    }

    fn marked_call_stream() -> AssistantStream {
        // 2 think tokens, 5 call tokens spelling a valid payload.
        let mut tokens = toks(&[THINK_OPEN, "a", " b", THINK_CLOSE, TOOL_OPEN]);
        tokens.extend(toks(&[
            "{\"name\":",
            " \"search\",",
            " \"arguments\":",
            " {\"queries\": [\"q\"]}",
            "}",
        ]));
        tokens.extend(toks(&[TOOL_CLOSE]));
        AssistantStream { tokens, structured_calls: vec![] }
    }

    #[test]
    fn marker_stream_partitions_into_regions() {
        let step = segment_step(&marked_call_stream(), 0).unwrap();
        assert_eq!(step.reasoning_tokens.len(), 2);
        let call = step.tool_call.as_ref().unwrap();
        assert_eq!(call.raw_tokens.len(), 5);
        assert_eq!(call.tool_name, "search");
        assert_eq!(call.arguments["queries"][0], "q");
        assert!(!step.is_terminal);
        assert!(step.reasoning_tokens.iter().all(|t| t.region == RegionTag::Reasoning));
        assert!(call.raw_tokens.iter().all(|t| t.region == RegionTag::Exploration));
    }

    #[test]
    fn stream_without_tool_call_is_terminal() {
        let stream = AssistantStream {
            tokens: toks(&[THINK_OPEN, "done", THINK_CLOSE, " 42"]),
            structured_calls: vec![],
        };
        let step = segment_step(&stream, 3).unwrap();
        assert!(step.is_terminal);
        assert!(step.tool_call.is_none());
        assert_eq!(step.reasoning_tokens.len(), 2); // "done" and " 42"
        assert_eq!(extract_final_answer(&stream).unwrap().as_deref(), Some("42"));
    }

    #[test]
    fn empty_think_segment_is_legal() {
        let mut tokens = toks(&[THINK_OPEN, THINK_CLOSE, TOOL_OPEN]);
        tokens.extend(toks(&["{\"name\": \"search\", \"arguments\": {}}"]));
        tokens.extend(toks(&[TOOL_CLOSE]));
        let step = segment_step(&AssistantStream { tokens, structured_calls: vec![] }, 0).unwrap();
        assert_eq!(step.reasoning_tokens.len(), 0);
        assert!(step.tool_call.is_some());
    }

    #[test]
    fn unbalanced_markers_are_malformed() {
        let stream = AssistantStream { tokens: toks(&[THINK_OPEN, "a"]), structured_calls: vec![] };
        assert!(matches!(
            segment_step(&stream, 0),
            Err(SegmentError::MalformedMarkers(_))
        ));
    }

    #[test]
    fn bad_payload_is_malformed() {
        let mut tokens = toks(&[TOOL_OPEN, "not json", TOOL_CLOSE]);
        tokens.insert(0, ScoredToken::new("x", -0.3));
        let stream = AssistantStream { tokens, structured_calls: vec![] };
        assert!(matches!(
            segment_step(&stream, 0),
            Err(SegmentError::MalformedMarkers(_))
        ));
    }

    #[test]
    fn missing_logprob_is_reported_with_index() {
        let mut stream = marked_call_stream();
        stream.tokens[2].logprob = None;
        match segment_step(&stream, 0) {
            Err(SegmentError::MissingLogprobs { index: 2, .. }) => {}
            other => panic!("expected MissingLogprobs, got {other:?}"),
        }
    }

    #[test]
    fn structured_call_tokens_become_exploration() {
        let stream = AssistantStream {
            tokens: toks(&["let", " me", " search"]),
            structured_calls: vec![StructuredCall {
                tool_name: "search".into(),
                arguments: serde_json::json!({"queries": ["q"]}),
                argument_tokens: toks(&["{\"queries\"", ": [\"q\"]}"]),
            }],
        };
        let step = segment_step(&stream, 1).unwrap();
        assert_eq!(step.reasoning_tokens.len(), 3);
        assert_eq!(step.tool_call.as_ref().unwrap().raw_tokens.len(), 2);
        assert!(!step.is_terminal);
    }

    #[test]
    fn segmentation_is_deterministic() {
        let a = segment_step(&marked_call_stream(), 0).unwrap();
        let b = segment_step(&marked_call_stream(), 0).unwrap();
        assert_eq!(a, b);
    }
}
