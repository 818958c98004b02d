use serde_json::Value;

use super::view::TapeView;
use crate::llm::{Message, Role};
use crate::tape::builtin::{ActionFailure, Call, ParseFailure, Respond, ToolCalls, ToolResult};
use crate::tape::codec::to_canonical_string;
use crate::tape::{Step, StepCategory, Tape};

/// Renders the steps visible in `view` as chat messages for the agent at
/// `agent_path`.
pub fn view_to_messages(view: &TapeView, tape: &Tape, agent_path: &str) -> Vec<Message> {
    view.visible
        .iter()
        .filter_map(|&index| step_to_message(&tape[index], view.opened_by == Some(index), agent_path))
        .collect()
}

fn step_to_message(step: &Step, opens_view: bool, agent_path: &str) -> Option<Message> {
    let content = || step.str_field("content").unwrap_or_default().to_string();
    let message = match step.kind.as_str() {
        "set_next_node" => return None,
        "user_message" => Message::user(content()),
        "assistant_message" => Message::assistant(content()),
        "call" => {
            let call = Call::from_step(step)?;
            if opens_view || step.metadata.agent != agent_path {
                Message::user(call.content)
            } else {
                Message::assistant(format!("Calling {}: {}", call.agent_name, call.content))
            }
        }
        "respond" => {
            let respond = Respond::from_step(step)?;
            if step.metadata.agent == agent_path {
                Message::assistant(respond.content)
            } else {
                Message::user(respond.content)
            }
        }
        "tool_calls" => Message {
            tool_calls: ToolCalls::from_step(step)?.tool_calls,
            ..Message::assistant("")
        },
        "tool_result" => {
            let result = ToolResult::from_step(step)?;
            Message::tool(result.call_id, result.text)
        }
        "action_failure" => {
            let failure = ActionFailure::from_step(step)?;
            match failure.call_id {
                Some(call_id) => Message::tool(call_id, format!("Error: {}", failure.reason)),
                None => Message::user(format!("Action failed: {}", failure.reason)),
            }
        }
        "parse_failure" => {
            let failure = ParseFailure::from_step(step)?;
            Message::user(format!("Your output could not be parsed: {}", failure.error))
        }
        _ => {
            let role = match step.category {
                StepCategory::Observation => Role::User,
                _ => Role::Assistant,
            };
            Message::new(role, render_custom(step))
        }
    };
    Some(message)
}

/// Plain content for content-only payloads, otherwise the kind followed by
/// the compact payload document.
pub fn render_custom(step: &Step) -> String {
    if step.payload.len() == 1 {
        if let Some(Value::String(text)) = step.payload.get("content") {
            return text.clone();
        }
    }
    format!("{}\n{}", step.kind, to_canonical_string(&Value::Object(step.payload.clone())))
}
