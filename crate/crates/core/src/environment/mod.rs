//! Environments fulfill the actions an agent leaves on a tape.

mod config;
mod replay;
mod tools;

use thiserror::Error;

use crate::llm::ToolSchema;
use crate::tape::builtin::{ActionFailure, ToolCall, ToolCalls, ToolResult};
use crate::tape::{StepCategory, Tape, TapeError};

pub use config::{EnvConfig, ToolConfig};
pub use replay::ReplayEnvironment;
pub use tools::{
    calculator, format_number, lookup, search, user_reply, Corpus, CorpusRecord, Tool, ToolContext, ToolEnvironment,
    ToolOutput, ToolRegistry, DEFAULT_ENV_NAME,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("tool `{0}` is already registered")]
    DuplicateTool(String),
    #[error("recorded observations do not fit the tape at step {index}: {message}")]
    ObservationMismatch { index: usize, message: String },
    #[error("environment config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Reacts to unfulfilled actions by appending observations. All side
/// effects of a session happen here.
pub trait Environment: Send + Sync {
    fn name(&self) -> &str;

    /// Returns `tape` with one observation appended per unfulfilled tool
    /// call, in request order. Returns an equal tape when nothing is
    /// pending.
    fn react(&self, tape: &Tape) -> Result<Tape, EnvError>;

    fn tool_schemas(&self) -> Vec<ToolSchema>;
}

/// A tool call waiting for its observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingCall {
    /// Index of the `tool_calls` step holding the call.
    pub index: usize,
    pub call: ToolCall,
}

/// Tool calls with no answering observation since the last observation that
/// answers no call. Requests are listed in tape order.
pub fn pending_calls(tape: &Tape) -> Vec<PendingCall> {
    let steps = tape.steps();
    let region = steps
        .iter()
        .rposition(|s| s.category == StepCategory::Observation && s.str_field("call_id").is_none())
        .map_or(0, |i| i + 1);
    let mut pending = Vec::new();
    for (index, step) in steps.iter().enumerate().skip(region) {
        if let Some(calls) = ToolCalls::from_step(step) {
            pending.extend(calls.tool_calls.into_iter().map(|call| PendingCall { index, call }));
        } else if step.category == StepCategory::Observation {
            if let Some(id) = step.str_field("call_id") {
                if let Some(at) = pending.iter().position(|p| p.call.call_id == id) {
                    pending.remove(at);
                }
            }
        }
    }
    pending
}

pub fn has_pending_calls(tape: &Tape) -> bool {
    !pending_calls(tape).is_empty()
}

/// Observation for a call that could not be carried out.
pub fn call_failure(call: &ToolCall, reason: impl Into<String>) -> crate::tape::Step {
    ActionFailure::new(Some(call.call_id.clone()), reason).into_step()
}

/// Observation for a call that succeeded.
pub fn call_result(call: &ToolCall, output: ToolOutput) -> crate::tape::Step {
    ToolResult {
        call_id: call.call_id.clone(),
        tool_name: call.tool_name.clone(),
        result: output.result,
        text: output.text,
    }
    .into_step()
}
