//! Canonical conversation construction and hashing.
//!
//! Both the rollout engine and the scripted simulator build conversations
//! through these functions, so a simulator compiled from a scenario script
//! reproduces the engine's requests byte-for-byte (up to whitespace, which
//! the hash ignores).

use super::ChatMessage;
use crate::model::segment::{THINK_CLOSE, THINK_OPEN, TOOL_CLOSE, TOOL_OPEN};
use crate::model::Step;
use sha2::{Digest, Sha256};

/// System prompt opening every rollout conversation.
pub const ROLLOUT_SYSTEM_PROMPT: &str = include_str!("../../assets/rollout_system.txt");

/// Initial conversation for a task: system prompt plus the question.
pub fn initial_messages(question: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(ROLLOUT_SYSTEM_PROMPT),
        ChatMessage::user(question),
    ]
}

/// Renders a step back into the assistant message content that produced it.
/// Assumes the standard grammar (think segment, then an optional tool call);
/// only non-terminal steps are ever replayed into a conversation prefix.
pub fn step_assistant_content(step: &Step) -> String {
    let mut out = String::from(THINK_OPEN);
    for t in &step.reasoning_tokens {
        out.push_str(&t.text);
    }
    out.push_str(THINK_CLOSE);
    if let Some(call) = &step.tool_call {
        out.push_str(TOOL_OPEN);
        for t in &call.raw_tokens {
            out.push_str(&t.text);
        }
        out.push_str(TOOL_CLOSE);
    }
    out
}

/// Conversation for a task after the given steps: the initial prompt, then
/// one assistant turn (and tool turn, when present) per step.
pub fn messages_after_steps(question: &str, steps: &[Step]) -> Vec<ChatMessage> {
    let mut messages = initial_messages(question);
    for step in steps {
        messages.push(ChatMessage::assistant(step_assistant_content(step)));
        if let Some(resp) = &step.tool_response {
            messages.push(ChatMessage::tool(resp.content.clone()));
        }
    }
    messages
}

/// Collapses whitespace runs to single spaces and trims, so fixtures stay
/// stable across serializers with different formatting.
pub fn canonical_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Stable hex digest of a conversation, insensitive to whitespace-only
/// formatting differences in message content.
pub fn conversation_hash(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.role.to_string().as_bytes());
        hasher.update([0x1f]);
        hasher.update(canonical_text(&m.content).as_bytes());
        hasher.update([0x1e]);
    }
    hex::encode(hasher.finalize())
}
