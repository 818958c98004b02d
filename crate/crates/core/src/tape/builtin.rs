//! Typed views over the built-in step kinds.
//!
//! Built-in steps are constructed here without going through the registry:
//! their schemas are fixed, so the constructors always produce valid steps.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::step::{Step, StepCategory};

fn object(value: Value) -> Map<String, Value> {
    match value {
        Value::Object(map) => map,
        _ => unreachable!("built-in payloads are objects"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Call {
    pub agent_name: String,
    pub content: String,
}

impl Call {
    pub const KIND: &'static str = "call";

    pub fn new(agent_name: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            agent_name: agent_name.into(),
            content: content.into(),
        }
    }

    pub fn into_step(self) -> Step {
        Step::raw(
            Self::KIND,
            StepCategory::Thought,
            object(json!({ "agent_name": self.agent_name, "content": self.content })),
        )
    }

    pub fn from_step(step: &Step) -> Option<Self> {
        (step.kind == Self::KIND).then(|| Self {
            agent_name: step.str_field("agent_name").unwrap_or_default().into(),
            content: step.str_field("content").unwrap_or_default().into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Respond {
    pub content: String,
}

impl Respond {
    pub const KIND: &'static str = "respond";

    pub fn new(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
        }
    }

    pub fn into_step(self) -> Step {
        Step::raw(Self::KIND, StepCategory::Thought, object(json!({ "content": self.content })))
    }

    pub fn from_step(step: &Step) -> Option<Self> {
        (step.kind == Self::KIND).then(|| Self::new(step.str_field("content").unwrap_or_default()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetNextNode {
    pub next_node: usize,
}

impl SetNextNode {
    pub const KIND: &'static str = "set_next_node";

    pub fn new(next_node: usize) -> Self {
        Self { next_node }
    }

    pub fn into_step(self) -> Step {
        Step::raw(
            Self::KIND,
            StepCategory::Control,
            object(json!({ "next_node": self.next_node })),
        )
    }

    pub fn from_step(step: &Step) -> Option<Self> {
        if step.kind != Self::KIND {
            return None;
        }
        let next_node = step.field("next_node")?.as_u64()?;
        Some(Self::new(next_node as usize))
    }
}

macro_rules! content_step {
    ($name:ident, $kind:literal, $category:expr) => {
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct $name {
            pub content: String,
        }

        impl $name {
            pub const KIND: &'static str = $kind;

            pub fn new(content: impl Into<String>) -> Self {
                Self {
                    content: content.into(),
                }
            }

            pub fn into_step(self) -> Step {
                Step::raw(Self::KIND, $category, object(json!({ "content": self.content })))
            }

            pub fn from_step(step: &Step) -> Option<Self> {
                (step.kind == Self::KIND).then(|| Self::new(step.str_field("content").unwrap_or_default()))
            }
        }
    };
}

content_step!(UserMessage, "user_message", StepCategory::Observation);
content_step!(AssistantMessage, "assistant_message", StepCategory::Action);

/// One requested tool invocation. `arguments` is the raw JSON text produced
/// by the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: String,
    pub tool_name: String,
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCalls {
    pub tool_calls: Vec<ToolCall>,
}

impl ToolCalls {
    pub const KIND: &'static str = "tool_calls";

    pub fn new(tool_calls: Vec<ToolCall>) -> Self {
        Self { tool_calls }
    }

    pub fn into_step(self) -> Step {
        let calls = serde_json::to_value(&self.tool_calls).expect("tool calls serialize");
        Step::raw(Self::KIND, StepCategory::Action, object(json!({ "tool_calls": calls })))
    }

    pub fn from_step(step: &Step) -> Option<Self> {
        if step.kind != Self::KIND {
            return None;
        }
        let calls = serde_json::from_value(step.field("tool_calls")?.clone()).ok()?;
        Some(Self::new(calls))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolResult {
    pub call_id: String,
    pub tool_name: String,
    pub result: Value,
    /// Rendered form used when the result is placed in a prompt.
    pub text: String,
}

impl ToolResult {
    pub const KIND: &'static str = "tool_result";

    pub fn into_step(self) -> Step {
        Step::raw(
            Self::KIND,
            StepCategory::Observation,
            object(json!({
                "call_id": self.call_id,
                "tool_name": self.tool_name,
                "result": self.result,
                "text": self.text,
            })),
        )
    }

    pub fn from_step(step: &Step) -> Option<Self> {
        (step.kind == Self::KIND).then(|| Self {
            call_id: step.str_field("call_id").unwrap_or_default().into(),
            tool_name: step.str_field("tool_name").unwrap_or_default().into(),
            result: step.field("result").cloned().unwrap_or(Value::Null),
            text: step.str_field("text").unwrap_or_default().into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionFailure {
    pub call_id: Option<String>,
    pub reason: String,
}

impl ActionFailure {
    pub const KIND: &'static str = "action_failure";

    pub fn new(call_id: Option<String>, reason: impl Into<String>) -> Self {
        Self {
            call_id,
            reason: reason.into(),
        }
    }

    pub fn into_step(self) -> Step {
        let mut payload = object(json!({ "reason": self.reason }));
        if let Some(call_id) = self.call_id {
            payload.insert("call_id".into(), Value::String(call_id));
        }
        Step::raw(Self::KIND, StepCategory::Observation, payload)
    }

    pub fn from_step(step: &Step) -> Option<Self> {
        (step.kind == Self::KIND).then(|| Self {
            call_id: step.str_field("call_id").map(str::to_string),
            reason: step.str_field("reason").unwrap_or_default().into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    pub raw: String,
    pub error: String,
}

impl ParseFailure {
    pub const KIND: &'static str = "parse_failure";

    pub fn new(raw: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            raw: raw.into(),
            error: error.into(),
        }
    }

    pub fn into_step(self) -> Step {
        Step::raw(
            Self::KIND,
            StepCategory::Observation,
            object(json!({ "raw": self.raw, "error": self.error })),
        )
    }

    pub fn from_step(step: &Step) -> Option<Self> {
        (step.kind == Self::KIND).then(|| {
            Self::new(
                step.str_field("raw").unwrap_or_default(),
                step.str_field("error").unwrap_or_default(),
            )
        })
    }
}
