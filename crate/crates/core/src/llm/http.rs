//! Streaming client for chat-completions compatible endpoints.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::debug;

use super::error::LlmError;
use super::prompt::{LlmOutput, Message, Prompt, ToolCall, Usage};
use super::provider::LlmProvider;
use super::stream::{EventSource, StreamEvent};

pub const API_BASE_ENV: &str = "LLM_API_BASE";
pub const API_KEY_ENV: &str = "LLM_API_KEY";
pub const MODEL_ENV: &str = "LLM_MODEL";

/// Unset fields fall back to `LLM_API_BASE`, `LLM_API_KEY` and `LLM_MODEL`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_base: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

pub struct HttpProvider {
    model: String,
    endpoint: String,
    api_key: Option<String>,
    temperature: Option<f64>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let env = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let model = config
            .model
            .or_else(|| env(MODEL_ENV))
            .ok_or_else(|| LlmError::Config(format!("no model configured and {MODEL_ENV} unset")))?;
        let base = config
            .api_base
            .or_else(|| env(API_BASE_ENV))
            .ok_or_else(|| LlmError::Config(format!("no api_base configured and {API_BASE_ENV} unset")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.unwrap_or(300)))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self {
            model,
            endpoint: format!("{}/chat/completions", base.trim_end_matches('/')),
            api_key: config.api_key.or_else(|| env(API_KEY_ENV)),
            temperature: config.temperature,
            client,
        })
    }
}

impl LlmProvider for HttpProvider {
    fn model_name(&self) -> &str {
        &self.model
    }

    fn stream(&self, prompt: &Prompt) -> Result<EventSource<'static>, LlmError> {
        let mut body = request_body(&self.model, prompt);
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        debug!(endpoint = %self.endpoint, prompt_id = %prompt.id, "sending chat completion request");
        let mut request = self
            .client
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .body(serde_json::to_vec(&body)?);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(LlmError::Transport(format!("HTTP {status}: {text}")));
        }
        Ok(Box::new(SseEvents::new(BufReader::new(response))))
    }
}

fn wire_message(message: &Message) -> Value {
    let mut out = json!({ "role": message.role.as_str(), "content": message.content });
    if !message.tool_calls.is_empty() {
        out["tool_calls"] = message
            .tool_calls
            .iter()
            .map(|c| {
                json!({
                    "id": c.call_id,
                    "type": "function",
                    "function": { "name": c.tool_name, "arguments": c.arguments },
                })
            })
            .collect();
    }
    if let Some(id) = &message.tool_call_id {
        out["tool_call_id"] = json!(id);
    }
    out
}

/// Request document in the chat-completions wire shape.
pub fn request_body(model: &str, prompt: &Prompt) -> Value {
    let mut body = json!({
        "model": model,
        "stream": true,
        "stream_options": { "include_usage": true },
        "messages": prompt.messages.iter().map(wire_message).collect::<Vec<_>>(),
    });
    if !prompt.tools.is_empty() {
        body["tools"] = prompt
            .tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    },
                })
            })
            .collect();
    }
    body
}

#[derive(Default)]
struct PartialCall {
    id: String,
    name: String,
    arguments: String,
}

/// Parses a server-sent-event body of streamed completion chunks.
pub struct SseEvents<R> {
    reader: R,
    content: String,
    saw_content: bool,
    calls: BTreeMap<u64, PartialCall>,
    usage: Option<Usage>,
    done: bool,
}

impl<R: BufRead> SseEvents<R> {
    pub fn new(reader: R) -> Self {
        Self {
            reader,
            content: String::new(),
            saw_content: false,
            calls: BTreeMap::new(),
            usage: None,
            done: false,
        }
    }

    fn finish(&mut self) -> StreamEvent {
        self.done = true;
        let tool_calls = std::mem::take(&mut self.calls)
            .into_values()
            .map(|c| ToolCall {
                call_id: c.id,
                tool_name: c.name,
                arguments: c.arguments,
            })
            .collect();
        let content = (self.saw_content || !self.content.is_empty()).then(|| std::mem::take(&mut self.content));
        StreamEvent::Done {
            output: LlmOutput { content, tool_calls },
            usage: self.usage,
        }
    }

    /// Applies one data payload; returns a chunk when it carried text.
    fn apply(&mut self, data: &Value) -> Option<String> {
        if let Some(usage) = data.get("usage").filter(|u| u.is_object()) {
            let count = |key: &str| usage.get(key).and_then(Value::as_u64).unwrap_or(0);
            self.usage = Some(Usage {
                input_tokens: count("prompt_tokens"),
                output_tokens: count("completion_tokens"),
            });
        }
        let delta = data.pointer("/choices/0/delta")?;
        for call in delta.get("tool_calls").and_then(Value::as_array).into_iter().flatten() {
            let index = call.get("index").and_then(Value::as_u64).unwrap_or(0);
            let entry = self.calls.entry(index).or_default();
            if let Some(id) = call.get("id").and_then(Value::as_str) {
                entry.id = id.to_string();
            }
            if let Some(name) = call.pointer("/function/name").and_then(Value::as_str) {
                entry.name.push_str(name);
            }
            if let Some(args) = call.pointer("/function/arguments").and_then(Value::as_str) {
                entry.arguments.push_str(args);
            }
        }
        match delta.get("content").and_then(Value::as_str) {
            Some(text) => {
                self.saw_content = true;
                if text.is_empty() {
                    return None;
                }
                self.content.push_str(text);
                Some(text.to_string())
            }
            None => None,
        }
    }
}

impl<R: BufRead> Iterator for SseEvents<R> {
    type Item = Result<StreamEvent, LlmError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut line = String::new();
        loop {
            line.clear();
            match self.reader.read_line(&mut line) {
                Ok(0) => return Some(Ok(self.finish())),
                Ok(_) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(LlmError::Transport(e.to_string())));
                }
            }
            let Some(data) = line.trim_end().strip_prefix("data:") else {
                continue;
            };
            let data = data.trim();
            if data == "[DONE]" {
                return Some(Ok(self.finish()));
            }
            let value: Value = match serde_json::from_str(data) {
                Ok(v) => v,
                Err(e) => {
                    self.done = true;
                    return Some(Err(LlmError::Transport(format!("bad stream payload: {e}"))));
                }
            };
            if let Some(message) = value.pointer("/error/message").and_then(Value::as_str) {
                self.done = true;
                return Some(Err(LlmError::Transport(message.to_string())));
            }
            if let Some(chunk) = self.apply(&value) {
                return Some(Ok(StreamEvent::Chunk(chunk)));
            }
        }
    }
}
