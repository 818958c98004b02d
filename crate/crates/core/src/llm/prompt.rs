use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::tape::codec::to_canonical_string;
use crate::tape::new_id;

pub use crate::tape::builtin::ToolCall;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    /// Tool invocations requested by an assistant message.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    /// The call a tool message answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            tool_call_id: Some(call_id.into()),
            ..Self::new(Role::Tool, content)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// JSON-schema object describing the named arguments.
    pub parameters: Value,
}

impl ToolSchema {
    pub fn new(name: &str, description: &str, parameters: Value) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            parameters,
        }
    }

    /// Schema with string-typed, required parameters.
    pub fn with_string_args(name: &str, description: &str, args: &[(&str, &str)]) -> Self {
        let properties: serde_json::Map<String, Value> = args
            .iter()
            .map(|(arg, desc)| (arg.to_string(), json!({ "type": "string", "description": desc })))
            .collect();
        let required: Vec<&str> = args.iter().map(|(arg, _)| *arg).collect();
        Self::new(
            name,
            description,
            json!({ "type": "object", "properties": properties, "required": required }),
        )
    }
}

/// One LLM request. A prompt with no messages is the null prompt: nodes
/// return it when they need no LLM call, and it is never sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<ToolSchema>,
}

impl Prompt {
    pub fn new(messages: Vec<Message>) -> Self {
        Self {
            id: new_id(),
            messages,
            tools: Vec::new(),
        }
    }

    pub fn null() -> Self {
        Self::new(Vec::new())
    }

    pub fn with_tools(mut self, tools: Vec<ToolSchema>) -> Self {
        self.tools = tools;
        self
    }

    pub fn is_null(&self) -> bool {
        self.messages.is_empty()
    }

    /// Canonical text of everything except the id; equal keys mean the two
    /// prompts would be sent identically.
    pub fn content_key(&self) -> String {
        to_canonical_string(&json!({ "messages": self.messages, "tools": self.tools }))
    }

    /// Equality ignoring the prompt id.
    pub fn content_eq(&self, other: &Prompt) -> bool {
        self.messages == other.messages && self.tools == other.tools
    }

    /// Index of the first message at which the two prompts differ, or
    /// `None` when only the tool lists differ (or nothing does).
    pub fn first_difference(&self, other: &Prompt) -> Option<usize> {
        let common = self
            .messages
            .iter()
            .zip(&other.messages)
            .take_while(|(a, b)| a == b)
            .count();
        if common < self.messages.len().max(other.messages.len()) {
            Some(common)
        } else {
            None
        }
    }

    pub fn word_count(&self) -> u64 {
        self.messages.iter().map(|m| words(&m.content)).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmOutput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
}

impl LlmOutput {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: Some(content.into()),
            tool_calls: Vec::new(),
        }
    }

    pub fn calls(tool_calls: Vec<ToolCall>) -> Self {
        Self {
            content: None,
            tool_calls,
        }
    }

    pub fn content_str(&self) -> &str {
        self.content.as_deref().unwrap_or("")
    }

    pub fn word_count(&self) -> u64 {
        words(self.content_str())
            + self
                .tool_calls
                .iter()
                .map(|c| words(&c.tool_name) + words(&c.arguments))
                .sum::<u64>()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

fn words(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
