use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::error::LlmError;
use super::prompt::{LlmOutput, Prompt};
use super::provider::LlmProvider;
use super::stream::{Chunking, EventSource, StreamEvent};

/// One scripted response: plain text or a full output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Text(String),
    Output(LlmOutput),
}

impl ScriptEntry {
    fn into_output(self) -> LlmOutput {
        match self {
            ScriptEntry::Text(text) => LlmOutput::text(text),
            ScriptEntry::Output(output) => output,
        }
    }
}

/// Response chosen when the prompt text contains `contains`. An empty
/// pattern matches every prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub contains: String,
    pub output: ScriptEntry,
}

/// Deterministic provider configuration.
///
/// Rules are tried first, in order; otherwise the next entry of the ordered
/// script is used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub script: Vec<ScriptEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub chunking: Chunking,
}

fn default_model() -> String {
    "mock".to_string()
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            model: default_model(),
            script: Vec::new(),
            rules: Vec::new(),
            chunking: Chunking::default(),
        }
    }
}

#[derive(Debug)]
struct MockState {
    next: usize,
    issued_call_ids: usize,
}

#[derive(Debug)]
pub struct MockProvider {
    config: MockConfig,
    state: Mutex<MockState>,
}

impl MockProvider {
    pub fn new(config: MockConfig) -> Self {
        Self {
            config,
            state: Mutex::new(MockState {
                next: 0,
                issued_call_ids: 0,
            }),
        }
    }

    pub fn ordered(outputs: Vec<LlmOutput>) -> Self {
        Self::new(MockConfig {
            script: outputs.into_iter().map(ScriptEntry::Output).collect(),
            ..MockConfig::default()
        })
    }

    pub fn keyed(rules: Vec<(&str, LlmOutput)>) -> Self {
        Self::new(MockConfig {
            rules: rules
                .into_iter()
                .map(|(contains, output)| MockRule {
                    contains: contains.into(),
                    output: ScriptEntry::Output(output),
                })
                .collect(),
            ..MockConfig::default()
        })
    }

    /// Number of ordered-script entries consumed so far.
    pub fn position(&self) -> usize {
        self.state.lock().map(|s| s.next).unwrap_or(0)
    }

    fn choose(&self, prompt: &Prompt) -> Result<LlmOutput, LlmError> {
        let text: String = prompt
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let chosen = match self.config.rules.iter().find(|r| text.contains(&r.contains)) {
            Some(rule) => rule.output.clone(),
            None => {
                let Some(entry) = self.config.script.get(state.next) else {
                    return Err(if self.config.script.is_empty() {
                        LlmError::NoMatchingRule
                    } else {
                        LlmError::ScriptExhausted(self.config.script.len())
                    });
                };
                state.next += 1;
                entry.clone()
            }
        };
        let mut output = chosen.into_output();
        for call in output.tool_calls.iter_mut().filter(|c| c.call_id.is_empty()) {
            state.issued_call_ids += 1;
            call.call_id = format!("call_{}", state.issued_call_ids);
        }
        Ok(output)
    }
}

impl LlmProvider for MockProvider {
    fn model_name(&self) -> &str {
        &self.config.model
    }

    fn stream(&self, prompt: &Prompt) -> Result<EventSource<'static>, LlmError> {
        let output = self.choose(prompt)?;
        Ok(scripted_events(output, self.config.chunking))
    }
}

/// Event source that streams a fixed output in chunks.
pub(crate) fn scripted_events(output: LlmOutput, chunking: Chunking) -> EventSource<'static> {
    let chunks = chunking.split(output.content_str());
    let events: Vec<_> = chunks
        .into_iter()
        .map(StreamEvent::Chunk)
        .chain(std::iter::once(StreamEvent::Done { output, usage: None }))
        .map(Ok)
        .collect();
    Box::new(events.into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::prompt::{Message, ToolCall};
    use crate::llm::stream::LlmStream;
    use proptest::prelude::*;

    fn ask(provider: &MockProvider, text: &str) -> Result<LlmOutput, LlmError> {
        let prompt = Prompt::new(vec![Message::user(text)]);
        Ok(LlmStream::new(provider.stream(&prompt)?).into_output()?.unwrap())
    }

    #[test]
    fn ordered_script_then_exhausted() {
        let provider = MockProvider::ordered(vec![LlmOutput::text("one"), LlmOutput::text("two")]);
        assert_eq!(ask(&provider, "x").unwrap().content_str(), "one");
        assert_eq!(ask(&provider, "x").unwrap().content_str(), "two");
        assert!(matches!(ask(&provider, "x"), Err(LlmError::ScriptExhausted(2))));
    }

    #[test]
    fn keyed_rules_first_match() {
        let provider = MockProvider::keyed(vec![
            ("weather", LlmOutput::text("sunny")),
            ("", LlmOutput::text("fallback")),
        ]);
        assert_eq!(ask(&provider, "the weather today").unwrap().content_str(), "sunny");
        assert_eq!(ask(&provider, "anything").unwrap().content_str(), "fallback");
        assert_eq!(ask(&provider, "weather again").unwrap().content_str(), "sunny");
    }

    #[test]
    fn no_rule_matches() {
        let provider = MockProvider::keyed(vec![("zzz", LlmOutput::text("x"))]);
        assert!(matches!(ask(&provider, "abc"), Err(LlmError::NoMatchingRule)));
    }

    #[test]
    fn missing_call_ids_are_numbered() {
        let call = |id: &str| ToolCall {
            call_id: id.into(),
            tool_name: "calculator".into(),
            arguments: "{}".into(),
        };
        let provider = MockProvider::ordered(vec![LlmOutput::calls(vec![call(""), call("keep"), call("")])]);
        let ids: Vec<_> = ask(&provider, "q")
            .unwrap()
            .tool_calls
            .into_iter()
            .map(|c| c.call_id)
            .collect();
        assert_eq!(ids, ["call_1", "keep", "call_2"]);
    }

    proptest! {
        #[test]
        fn chunks_reassemble_to_content(text in "\\PC{0,80}", size in 1usize..12, words in any::<bool>()) {
            let chunking = if words { Chunking::Words } else { Chunking::Fixed(size) };
            let provider = MockProvider::new(MockConfig {
                script: vec![ScriptEntry::Text(text.clone())],
                chunking,
                ..MockConfig::default()
            });
            let prompt = Prompt::new(vec![Message::user("q")]);
            let mut concatenated = String::new();
            let mut final_content = None;
            for event in LlmStream::new(provider.stream(&prompt).unwrap()) {
                match event.unwrap() {
                    StreamEvent::Chunk(c) => concatenated.push_str(&c),
                    StreamEvent::Done { output, .. } => final_content = Some(output.content_str().to_string()),
                }
            }
            prop_assert_eq!(final_content.unwrap(), concatenated.clone());
            prop_assert_eq!(concatenated, text);
        }
    }
}
