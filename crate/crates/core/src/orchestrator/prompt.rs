use serde::{Deserialize, Serialize};

use crate::gateway::{count_tokens_estimate, ChatMessage};
use crate::memory::ScoredMemory;

pub const SCOPE_GUARD: &str = "Stay within the team's task and what participants have said. \
Do not introduce facts, sources, or figures that were not provided. Keep replies short.";

/// One speaker-attributed line of the recent conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub speaker_id: String,
    pub display_name: String,
    pub content: String,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptInputs<'a> {
    pub persona_prompt: &'a str,
    pub task: Option<&'a str>,
    pub scope_guard: bool,
    pub token_budget: u64,
    pub token_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltPrompt {
    pub messages: Vec<ChatMessage>,
    /// Memories that survived trimming, in score order.
    pub memory_ids: Vec<u64>,
    pub dropped_lines: usize,
}

fn system_text(inputs: &PromptInputs<'_>, memories: &[&ScoredMemory]) -> String {
    let mut parts = vec![inputs.persona_prompt.trim_end().to_string()];
    if let Some(task) = inputs.task.filter(|t| !t.trim().is_empty()) {
        parts.push(format!("Team task:\n{}", task.trim()));
    }
    if !memories.is_empty() {
        let lines: Vec<String> = memories
            .iter()
            .map(|m| format!("[memory] {}", m.record.content))
            .collect();
        parts.push(format!("Relevant memories:\n{}", lines.join("\n")));
    }
    if inputs.scope_guard {
        parts.push(SCOPE_GUARD.to_string());
    }
    parts.retain(|p| !p.is_empty());
    parts.join("\n\n")
}

fn line_message(line: &TranscriptLine) -> ChatMessage {
    ChatMessage::user(
        format!("{}: {}", line.display_name, line.content),
        Some(line.display_name.clone()),
    )
}

/// Estimated size of a message list under the gateway's token heuristic.
pub fn estimate_messages(messages: &[ChatMessage], factor: f64) -> u64 {
    messages.iter().map(|m| count_tokens_estimate(&m.content, factor)).sum()
}

/// Assembles `[system, transcript...]`. When over budget, the oldest
/// transcript lines go first, then the lowest-scored memories. The newest
/// line is never dropped; if it and the bare system text do not fit, the
/// budget is misconfigured and `None` is returned.
pub fn build_prompt(
    inputs: &PromptInputs<'_>,
    retrieved: &[ScoredMemory],
    window: &[TranscriptLine],
) -> Option<BuiltPrompt> {
    let mut memories: Vec<&ScoredMemory> = retrieved.iter().collect();
    let mut start = 0usize;
    let f = inputs.token_factor;
    let newest = window.last().map(line_message);
    let floor = count_tokens_estimate(&system_text(inputs, &[]), f)
        + newest.as_ref().map_or(0, |m| count_tokens_estimate(&m.content, f));
    if floor > inputs.token_budget {
        return None;
    }
    let line_costs: Vec<u64> = window
        .iter()
        .map(|l| count_tokens_estimate(&line_message(l).content, f))
        .collect();
    loop {
        let total = count_tokens_estimate(&system_text(inputs, &memories), f) + line_costs[start..].iter().sum::<u64>();
        if total <= inputs.token_budget {
            break;
        }
        if window.len() - start > 1 {
            start += 1;
        } else if memories.pop().is_none() {
            // unreachable given the floor check
            return None;
        }
    }
    let mut messages = vec![ChatMessage::system(system_text(inputs, &memories))];
    messages.extend(window[start..].iter().map(line_message));
    Some(BuiltPrompt {
        messages,
        memory_ids: memories.iter().map(|m| m.record.id).collect(),
        dropped_lines: start,
    })
}
