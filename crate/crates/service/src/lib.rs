//! Tape store, run management and HTTP API for the `tapes` runtime.

pub mod api;
pub mod cli;
pub mod runs;
pub mod store;

use std::sync::Arc;

use tapes::agent::{AgentConfig, AgentError};
use tapes::components::standard_components;
use tapes::environment::{EnvConfig, EnvError};
use tapes::llm::{CallDb, LlmError};
use tapes::optimize::OptimizeError;
use tapes::orchestrator::{main_loop_with, FinishReason, LoopConfig, MainLoopEvent, ReplayError};
use tapes::tape::{Tape, TapeError};
use thiserror::Error;

use store::{RunManifest, StoreError, TapeStore};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("no run `{0}`")]
    UnknownRun(String),
    #[error("{0}")]
    Invalid(String),
}

/// Result of one completed session.
#[derive(Debug, Clone)]
pub struct SessionResult {
    pub tape: Tape,
    pub reason: FinishReason,
    pub error: Option<String>,
    pub rounds: usize,
}

/// Runs `agent` in `env` from `input`, then saves the input, the final
/// tape and its run manifest to `store`.
pub fn run_session(
    store: &TapeStore,
    db: Arc<CallDb>,
    agent: &AgentConfig,
    env: &EnvConfig,
    input: &Tape,
    loop_config: LoopConfig,
    emit: &mut dyn FnMut(&MainLoopEvent),
) -> Result<SessionResult, ServiceError> {
    let built = standard_components().build(agent, Some(db))?;
    let environment = env.build()?;
    if !store.contains(input.id()) {
        store.save(input)?;
    }
    let outcome = main_loop_with(&built, input, &environment, loop_config.clone(), &mut |event| emit(&event));
    store.save(&outcome.tape)?;
    let error = outcome.error.as_ref().map(ToString::to_string);
    store.save_manifest(&RunManifest {
        tape_id: outcome.tape.id().to_string(),
        input_tape_id: input.id().to_string(),
        agent: agent.clone(),
        env: env.clone(),
        loop_config,
        reason: outcome.reason,
        error: error.clone(),
    })?;
    Ok(SessionResult {
        tape: outcome.tape,
        reason: outcome.reason,
        error,
        rounds: outcome.rounds,
    })
}
