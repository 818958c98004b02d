use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("mock script exhausted after {0} responses")]
    ScriptExhausted(usize),
    #[error("no mock rule matches the prompt")]
    NoMatchingRule,
    #[error("prompt does not match recorded call `{prompt_id}`{}", describe_index(*.message_index))]
    PromptMismatch {
        /// Closest recorded call.
        prompt_id: String,
        /// First message index that differs; `None` when only tools differ.
        message_index: Option<usize>,
    },
    #[error("no recorded call `{0}`")]
    MissingRecord(String),
    #[error("llm call `{0}` not found")]
    NotFound(String),
    #[error("llm call `{0}` is already recorded")]
    DuplicatePromptId(String),
    #[error("null prompts are never sent to a provider")]
    NullPrompt,
    #[error("invalid provider configuration: {0}")]
    Config(String),
    #[error("database error: {0}")]
    Db(#[from] rusqlite::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn describe_index(index: Option<usize>) -> String {
    match index {
        Some(i) => format!(" at message {i}"),
        None => " in its tool list".to_string(),
    }
}
