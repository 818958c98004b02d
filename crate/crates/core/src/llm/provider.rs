use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::db::{CallDb, LlmCallRecord};
use super::error::LlmError;
use super::http::{HttpConfig, HttpProvider};
use super::mock::{MockConfig, MockProvider};
use super::prompt::{Prompt, Usage};
use super::replay::ReplayProvider;
use super::stream::{EventSource, LlmStream};
use crate::tape::now_iso;

/// A source of LLM completions.
///
/// Implementations must be usable from several runs at once.
pub trait LlmProvider: Send + Sync {
    fn model_name(&self) -> &str;

    fn stream(&self, prompt: &Prompt) -> Result<EventSource<'static>, LlmError>;
}

/// A provider plus an optional call recorder.
#[derive(Clone)]
pub struct LlmClient {
    provider: Arc<dyn LlmProvider>,
    recorder: Option<Arc<CallDb>>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("model", &self.provider.model_name())
            .field("recording", &self.recorder.is_some())
            .finish()
    }
}

impl LlmClient {
    pub fn new(provider: Arc<dyn LlmProvider>) -> Self {
        Self {
            provider,
            recorder: None,
        }
    }

    pub fn with_recorder(mut self, db: Arc<CallDb>) -> Self {
        self.recorder = Some(db);
        self
    }

    pub fn provider(&self) -> &Arc<dyn LlmProvider> {
        &self.provider
    }

    pub fn model_name(&self) -> &str {
        self.provider.model_name()
    }

    /// Starts a call. When a recorder is attached, the call is written to
    /// the database before the stream reports completion.
    pub fn complete(&self, prompt: &Prompt) -> Result<LlmStream<'static>, LlmError> {
        if prompt.is_null() {
            return Err(LlmError::NullPrompt);
        }
        let stream = LlmStream::new(self.provider.stream(prompt)?);
        let Some(db) = self.recorder.clone() else {
            return Ok(stream);
        };
        let prompt = prompt.clone();
        let model = self.provider.model_name().to_string();
        Ok(stream.on_complete(move |output, usage| {
            let usage = usage.unwrap_or(Usage {
                input_tokens: prompt.word_count(),
                output_tokens: output.word_count(),
            });
            db.record(&LlmCallRecord {
                prompt_id: prompt.id.clone(),
                model,
                output: output.clone(),
                input_tokens: usage.input_tokens,
                output_tokens: usage.output_tokens,
                created_at: now_iso(),
                prompt,
            })
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    Mock(MockConfig),
    Http(HttpConfig),
    /// Serves recorded outputs from a call database.
    Replay {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        db_path: Option<String>,
    },
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Arc<dyn LlmProvider>, LlmError> {
        Ok(match self {
            ProviderConfig::Mock(config) => Arc::new(MockProvider::new(config.clone())),
            ProviderConfig::Http(config) => Arc::new(HttpProvider::new(config.clone())?),
            ProviderConfig::Replay { db_path } => {
                let db = match db_path {
                    Some(path) => CallDb::open(path)?,
                    None => CallDb::open_default()?,
                };
                Arc::new(ReplayProvider::new(db.list()?))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::prompt::{LlmOutput, Message};
    use crate::llm::stream::StreamEvent;

    #[test]
    fn mock_call_is_recorded_once() {
        let db = Arc::new(CallDb::open_in_memory().unwrap());
        let client = LlmClient::new(Arc::new(MockProvider::ordered(vec![LlmOutput::text("the answer")])))
            .with_recorder(db.clone());
        let prompt = Prompt::new(vec![Message::user("any prompt at all")]);
        let output = client.complete(&prompt).unwrap().into_output().unwrap().unwrap();
        assert_eq!(output.content_str(), "the answer");
        let rec = db.get(&prompt.id).unwrap();
        assert_eq!(rec.output, output);
        assert_eq!(rec.prompt, prompt);
        assert_eq!(rec.input_tokens, 4);
        assert_eq!(rec.output_tokens, 2);
        assert_eq!(db.count().unwrap(), 1);
    }

    #[test]
    fn record_precedes_done() {
        let db = Arc::new(CallDb::open_in_memory().unwrap());
        let client = LlmClient::new(Arc::new(MockProvider::ordered(vec![LlmOutput::text("a b c")])))
            .with_recorder(db.clone());
        let prompt = Prompt::new(vec![Message::user("q")]);
        for event in client.complete(&prompt).unwrap() {
            if let StreamEvent::Done { .. } = event.unwrap() {
                assert!(db.contains(&prompt.id).unwrap());
            } else {
                assert!(!db.contains(&prompt.id).unwrap());
            }
        }
    }

    #[test]
    fn null_prompt_is_refused() {
        let client = LlmClient::new(Arc::new(MockProvider::ordered(vec![])));
        assert!(matches!(client.complete(&Prompt::null()), Err(LlmError::NullPrompt)));
    }

    #[test]
    fn config_round_trip() {
        let json = r#"{"kind": "mock", "model": "m", "script": ["hello", {"content": "x"}]}"#;
        let config: ProviderConfig = serde_json::from_str(json).unwrap();
        let back: ProviderConfig = serde_json::from_value(serde_json::to_value(&config).unwrap()).unwrap();
        assert_eq!(config, back);
        assert_eq!(config.build().unwrap().model_name(), "m");
        let replay: ProviderConfig = serde_json::from_str(r#"{"kind": "replay", "db_path": ":memory:"}"#).unwrap();
        assert!(matches!(replay, ProviderConfig::Replay { .. }));
    }
}
