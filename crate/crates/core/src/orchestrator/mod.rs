//! The loop alternating agent runs and environment reactions.

mod replay;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::agent::{partial_execution, run, Agent, AgentError, AgentEvent, AgentRun, RunConfig};
use crate::environment::{has_pending_calls, EnvError, Environment};
use crate::tape::builtin::{ActionFailure, AssistantMessage};
use crate::tape::{StepRegistry, Tape};

pub use replay::{first_agent_step, replay, EnvMode, ReplayError, ReplayOptions, ReplayReport};

pub const DEFAULT_MAX_ROUNDS: usize = 32;
pub const EXIT_KIND: &str = "exit";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Agent runs allowed before the loop gives up.
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Action kinds that end the loop once the agent emits them.
    #[serde(default = "default_stop_on")]
    pub stop_on: BTreeSet<String>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_max_rounds() -> usize {
    DEFAULT_MAX_ROUNDS
}

fn default_stop_on() -> BTreeSet<String> {
    [AssistantMessage::KIND, EXIT_KIND].into_iter().map(String::from).collect()
}

fn default_max_iterations() -> usize {
    RunConfig::default().max_iterations
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            stop_on: default_stop_on(),
            max_iterations: default_max_iterations(),
        }
    }
}

impl LoopConfig {
    pub fn with_max_rounds(mut self, max_rounds: usize) -> Self {
        self.max_rounds = max_rounds;
        self
    }

    fn run_config(&self) -> RunConfig {
        RunConfig {
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    /// The agent emitted a stop action.
    Stop,
    RoundLimit,
    /// The agent's last action is one the environment does not serve.
    EnvironmentIdle,
    Error,
}

impl FinishReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FinishReason::Stop => "stop",
            FinishReason::RoundLimit => "round_limit",
            FinishReason::EnvironmentIdle => "environment_idle",
            FinishReason::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MainLoopEvent {
    Agent(AgentEvent),
    /// Tape after the environment appended observations.
    EnvTape(Tape),
    Finished {
        tape: Tape,
        reason: FinishReason,
        error: Option<String>,
    },
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug)]
pub struct LoopOutcome {
    pub tape: Tape,
    pub reason: FinishReason,
    pub error: Option<LoopError>,
    pub rounds: usize,
}

enum Phase<'a> {
    Start,
    NextRound,
    Agent { run: Box<AgentRun<'a>>, before: usize },
    Env,
    Done,
}

/// Consumer-paced loop: work advances only as events are pulled.
pub struct MainLoop<'a> {
    agent: &'a Agent,
    env: &'a dyn Environment,
    config: LoopConfig,
    tape: Tape,
    rounds: usize,
    phase: Phase<'a>,
    outcome: Option<LoopOutcome>,
}

/// Alternates agent runs and environment reactions on `tape`.
///
/// Starting from any intermediate tape continues the session: an
/// interrupted node execution is completed first, then pending tool calls
/// are served before the agent runs again. A tape ending in a stop action
/// is already finished.
pub fn main_loop<'a>(agent: &'a Agent, tape: &Tape, env: &'a dyn Environment, config: LoopConfig) -> MainLoop<'a> {
    MainLoop {
        agent,
        env,
        config,
        tape: tape.clone(),
        rounds: 0,
        phase: Phase::Start,
        outcome: None,
    }
}

/// Runs the loop to the end, reporting events to `emit`.
pub fn main_loop_with(
    agent: &Agent,
    tape: &Tape,
    env: &dyn Environment,
    config: LoopConfig,
    emit: &mut dyn FnMut(MainLoopEvent),
) -> LoopOutcome {
    let mut events = main_loop(agent, tape, env, config);
    for event in events.by_ref() {
        emit(event);
    }
    events.outcome.take().expect("finished loop has an outcome")
}

pub fn main_loop_to_end(agent: &Agent, tape: &Tape, env: &dyn Environment, config: LoopConfig) -> LoopOutcome {
    main_loop_with(agent, tape, env, config, &mut |_| {})
}

impl MainLoop<'_> {
    pub fn outcome(&self) -> Option<&LoopOutcome> {
        self.outcome.as_ref()
    }

    /// Drains the loop and returns its outcome.
    pub fn finish(mut self) -> LoopOutcome {
        for _ in self.by_ref() {}
        self.outcome.take().expect("finished loop has an outcome")
    }

    fn finish_with(&mut self, reason: FinishReason, error: Option<LoopError>) -> MainLoopEvent {
        info!(reason = reason.as_str(), rounds = self.rounds, steps = self.tape.len(), "loop finished");
        self.phase = Phase::Done;
        let message = error.as_ref().map(ToString::to_string);
        self.outcome = Some(LoopOutcome {
            tape: self.tape.clone(),
            reason,
            error,
            rounds: self.rounds,
        });
        MainLoopEvent::Finished {
            tape: self.tape.clone(),
            reason,
            error: message,
        }
    }

    /// Lets the environment react. `Ok(None)` when it added nothing.
    fn react(&mut self) -> Result<Option<MainLoopEvent>, MainLoopEvent> {
        match self.env.react(&self.tape) {
            Ok(tape) if tape.len() == self.tape.len() => Ok(None),
            Ok(tape) => {
                debug!(added = tape.len() - self.tape.len(), "environment reacted");
                self.tape = tape.clone();
                Ok(Some(MainLoopEvent::EnvTape(tape)))
            }
            Err(error) => {
                let failure = ActionFailure::new(None, error.to_string()).into_step();
                if let Ok(tape) = self.tape.append(&StepRegistry::default(), vec![failure], self.env.name()) {
                    self.tape = tape;
                }
                Err(self.finish_with(FinishReason::Error, Some(error.into())))
            }
        }
    }

    fn stopped(&self, from: usize) -> bool {
        self.tape.steps()[from..]
            .iter()
            .any(|s| s.is_action() && self.config.stop_on.contains(&s.kind))
    }
}

impl Iterator for MainLoop<'_> {
    type Item = MainLoopEvent;

    fn next(&mut self) -> Option<MainLoopEvent> {
        loop {
            match std::mem::replace(&mut self.phase, Phase::Done) {
                Phase::Done => return None,
                Phase::Start => {
                    self.phase = Phase::NextRound;
                    if partial_execution(&self.tape).is_some() {
                        continue;
                    }
                    if self.tape.last().is_some() && self.stopped(self.tape.len() - 1) {
                        return Some(self.finish_with(FinishReason::Stop, None));
                    }
                    if has_pending_calls(&self.tape) {
                        match self.react() {
                            Ok(Some(event)) => return Some(event),
                            Ok(None) => {}
                            Err(finished) => return Some(finished),
                        }
                    }
                }
                Phase::NextRound => {
                    if self.rounds >= self.config.max_rounds {
                        return Some(self.finish_with(FinishReason::RoundLimit, None));
                    }
                    self.rounds += 1;
                    debug!(round = self.rounds, "agent turn");
                    self.phase = Phase::Agent {
                        run: Box::new(run(self.agent, &self.tape, self.config.run_config())),
                        before: self.tape.len(),
                    };
                }
                Phase::Agent { mut run, before } => {
                    if let Some(event) = run.next() {
                        self.phase = Phase::Agent { run, before };
                        return Some(MainLoopEvent::Agent(event));
                    }
                    match run.finish() {
                        Ok(tape) => {
                            self.tape = tape;
                            if self.stopped(before) {
                                return Some(self.finish_with(FinishReason::Stop, None));
                            }
                            self.phase = Phase::Env;
                        }
                        Err(failure) => {
                            self.tape = failure.tape;
                            return Some(self.finish_with(FinishReason::Error, Some(failure.error.into())));
                        }
                    }
                }
                Phase::Env => {
                    self.phase = Phase::NextRound;
                    match self.react() {
                        Ok(Some(event)) => return Some(event),
                        Ok(None) if self.tape.last().is_some_and(|s| s.is_action()) => {
                            return Some(self.finish_with(FinishReason::EnvironmentIdle, None));
                        }
                        Ok(None) => {}
                        Err(finished) => return Some(finished),
                    }
                }
            }
        }
    }
}
