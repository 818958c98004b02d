//! LLM providers, streamed outputs and the call database.

mod db;
mod error;
pub mod http;
mod mock;
mod prompt;
mod provider;
mod replay;
mod stream;

pub use db::{default_path as default_db_path, CallDb, LlmCallRecord, DB_PATH_ENV, DEFAULT_DB_PATH};
pub use error::LlmError;
pub use http::{HttpConfig, HttpProvider};
pub use mock::{MockConfig, MockProvider, MockRule, ScriptEntry};
pub use prompt::{LlmOutput, Message, Prompt, Role, ToolCall, ToolSchema, Usage};
pub use provider::{LlmClient, LlmProvider, ProviderConfig};
pub use replay::ReplayProvider;
pub use stream::{Chunking, CompletionHandle, EventSource, LlmStream, StreamEvent};
