use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{main_loop_to_end, FinishReason, LoopConfig, LoopError};
use crate::agent::Agent;
use crate::environment::{Environment, ReplayEnvironment};
use crate::llm::{CallDb, LlmError, ReplayProvider};
use crate::tape::{diff_with, DiffOptions, DiffReport, Tape};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvMode {
    /// Observations come from the recorded tape.
    #[default]
    Replay,
    /// Observations come from a live environment.
    Live,
}

#[derive(Debug, Clone, Default)]
pub struct ReplayOptions {
    pub env_mode: EnvMode,
    /// Length of the recorded input; defaults to the index of the first
    /// agent-authored step.
    pub start: Option<usize>,
    pub diff: DiffOptions,
    pub loop_config: LoopConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub matched: bool,
    pub first_divergence: Option<usize>,
    pub diff: DiffReport,
    /// LLM calls answered from the database.
    pub calls_compared: usize,
    pub reason: FinishReason,
    #[serde(skip)]
    pub tape: Tape,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("no recorded call for prompt `{0}`")]
    MissingRecord(String),
    #[error("live replay needs an environment")]
    NoEnvironment,
    #[error("start {start} is beyond the recorded tape of {len} steps")]
    BadStart { start: usize, len: usize },
    /// The loop failed while the regenerated tape still agreed with the
    /// recording.
    #[error("replay stopped at step {index}: {source}")]
    Stopped { index: usize, source: LoopError },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Index of the first step produced by an agent.
pub fn first_agent_step(tape: &Tape) -> usize {
    tape.iter()
        .position(|s| !s.metadata.agent.is_empty())
        .unwrap_or(tape.len())
}

/// Re-runs the session recorded on `recorded` with LLM outputs from `db` and
/// compares the regenerated tape with the recording.
pub fn replay(
    agent: &Agent,
    recorded: &Tape,
    live_env: Option<&dyn Environment>,
    db: &CallDb,
    options: ReplayOptions,
) -> Result<ReplayReport, ReplayError> {
    let start = options.start.unwrap_or_else(|| first_agent_step(recorded));
    if start > recorded.len() {
        return Err(ReplayError::BadStart {
            start,
            len: recorded.len(),
        });
    }
    let mut ids: Vec<&str> = Vec::new();
    for step in recorded.iter() {
        if let Some(id) = step.metadata.prompt_id.as_deref() {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
    }
    let records = ids
        .iter()
        .map(|id| match db.find(id)? {
            Some(record) => Ok(record),
            None => Err(ReplayError::MissingRecord(id.to_string())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let provider = Arc::new(ReplayProvider::new(records));
    let replaying = agent.with_provider(provider.clone(), None);
    let replay_env;
    let env: &dyn Environment = match options.env_mode {
        EnvMode::Live => live_env.ok_or(ReplayError::NoEnvironment)?,
        EnvMode::Replay => {
            replay_env = ReplayEnvironment::new(recorded.clone())
                .with_schemas(live_env.map(|e| e.tool_schemas()).unwrap_or_default());
            &replay_env
        }
    };

    let outcome = main_loop_to_end(&replaying, &recorded.truncate(start), env, options.loop_config);
    let diff = diff_with(recorded, &outcome.tape, options.diff);
    if let Some(error) = outcome.error {
        // The loop appended one failure step; if everything before it agrees
        // with the recording the replay never diverged, it just could not go on.
        let produced = outcome.tape.len().saturating_sub(1);
        let agrees = produced <= recorded.len()
            && recorded.steps()[..produced]
                .iter()
                .zip(outcome.tape.steps())
                .all(|(a, b)| a.content_eq(b));
        if agrees {
            return Err(ReplayError::Stopped {
                index: produced,
                source: error,
            });
        }
    }
    Ok(ReplayReport {
        matched: diff.is_empty(),
        first_divergence: diff.first_difference(),
        diff,
        calls_compared: provider.served(),
        reason: outcome.reason,
        tape: outcome.tape,
    })
}
