//! The agent run loop.

use std::collections::VecDeque;

use tracing::{debug, warn};

use super::error::{AgentError, NodeError};
use super::node::{partial_execution, NodeContext, StepSink, BATCH_SIZE_KEY};
use super::tree::{select_node, Agent};
use super::view::CallResolver;
use crate::llm::LlmStream;
use crate::tape::builtin::{ActionFailure, Call, ParseFailure, Respond};
use crate::tape::{agent_metadata, Step, StepMetadata, Tape};

pub const DEFAULT_MAX_ITERATIONS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    /// Node executions allowed in one run before it fails as runaway.
    pub max_iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentEvent {
    /// Accumulated LLM text for a step that is still being generated.
    PartialStep { kind: String, text: String },
    Step(Step),
    FinalTape(Tape),
}

/// A run that ended in an error. `tape` holds everything generated before
/// the failure plus a step describing it.
#[derive(Debug)]
pub struct RunFailure {
    pub tape: Tape,
    pub error: AgentError,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "agent run failed: {}", self.error)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `agent` on `tape`, reporting events to `emit` as they happen.
pub fn run_with(
    agent: &Agent,
    tape: &Tape,
    config: RunConfig,
    emit: &mut dyn FnMut(AgentEvent),
) -> Result<Tape, RunFailure> {
    let mut state = RunState::new(agent, tape, config);
    while !state.is_done() {
        state.advance(emit);
    }
    state.into_result()
}

/// Runs `agent` on `tape` and returns the final tape.
pub fn run_to_end(agent: &Agent, tape: &Tape, config: RunConfig) -> Result<Tape, RunFailure> {
    run_with(agent, tape, config, &mut |_| {})
}

/// Runs `agent` on `tape` as a consumer-paced event iterator. Work happens
/// one node execution at a time as events are pulled.
pub fn run<'a>(agent: &'a Agent, tape: &Tape, config: RunConfig) -> AgentRun<'a> {
    AgentRun {
        state: RunState::new(agent, tape, config),
        buffer: VecDeque::new(),
    }
}

pub struct AgentRun<'a> {
    state: RunState<'a>,
    buffer: VecDeque<AgentEvent>,
}

impl AgentRun<'_> {
    /// Drains remaining events and returns the outcome.
    pub fn finish(mut self) -> Result<Tape, RunFailure> {
        for _ in self.by_ref() {}
        self.state.into_result()
    }

    /// The outcome, once the final tape has been yielded.
    pub fn outcome(&self) -> Option<&Result<Tape, RunFailure>> {
        self.state.outcome.as_ref()
    }
}

impl Iterator for AgentRun<'_> {
    type Item = AgentEvent;

    fn next(&mut self) -> Option<AgentEvent> {
        loop {
            if let Some(event) = self.buffer.pop_front() {
                return Some(event);
            }
            if self.state.is_done() {
                return None;
            }
            let buffer = &mut self.buffer;
            self.state.advance(&mut |e| buffer.push_back(e));
        }
    }
}

enum Progress {
    Continue,
    Stop,
}

/// Who was acting when a failure happened.
#[derive(Default)]
struct Attribution {
    agent: String,
    node: String,
}

struct RunState<'a> {
    agent: &'a Agent,
    input: Tape,
    working: Tape,
    added: Vec<Step>,
    iterations: usize,
    config: RunConfig,
    outcome: Option<Result<Tape, RunFailure>>,
}

impl<'a> RunState<'a> {
    fn new(agent: &'a Agent, tape: &Tape, config: RunConfig) -> Self {
        Self {
            agent,
            input: tape.clone(),
            working: tape.clone(),
            added: Vec::new(),
            iterations: 0,
            config,
            outcome: None,
        }
    }

    fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    fn into_result(self) -> Result<Tape, RunFailure> {
        self.outcome.expect("run has finished")
    }

    fn advance(&mut self, emit: &mut dyn FnMut(AgentEvent)) {
        if self.iterations >= self.config.max_iterations {
            let error = AgentError::Runaway {
                limit: self.config.max_iterations,
            };
            self.fail(error, Attribution::default(), emit);
            return;
        }
        self.iterations += 1;
        let mut who = Attribution::default();
        match self.iterate(&mut who, emit) {
            Ok(Progress::Continue) => {}
            Ok(Progress::Stop) => self.succeed(emit),
            Err(error) => self.fail(error, who, emit),
        }
    }

    fn final_tape(&self, extra: Option<Step>) -> Result<Tape, AgentError> {
        let mut steps = self.added.clone();
        steps.extend(extra);
        Ok(self.input.append(self.agent.registry(), steps, self.agent.name())?)
    }

    fn succeed(&mut self, emit: &mut dyn FnMut(AgentEvent)) {
        match self.final_tape(None) {
            Ok(tape) => {
                emit(AgentEvent::FinalTape(tape.clone()));
                self.outcome = Some(Ok(tape));
            }
            Err(error) => self.fail(error, Attribution::default(), emit),
        }
    }

    fn fail(&mut self, error: AgentError, who: Attribution, emit: &mut dyn FnMut(AgentEvent)) {
        warn!(%error, agent = %who.agent, node = %who.node, "agent run failed");
        let agent = if who.agent.is_empty() {
            self.agent.name().to_string()
        } else {
            who.agent
        };
        let step = ActionFailure::new(None, error.to_string())
            .into_step()
            .with_metadata(agent_metadata(&agent, &who.node, None));
        emit(AgentEvent::Step(step.clone()));
        let tape = match self.final_tape(Some(step)) {
            Ok(tape) => tape,
            Err(_) => self.working.clone(),
        };
        emit(AgentEvent::FinalTape(tape.clone()));
        self.outcome = Some(Err(RunFailure { tape, error }));
    }

    fn iterate(&mut self, who: &mut Attribution, emit: &mut dyn FnMut(AgentEvent)) -> Result<Progress, AgentError> {
        let root = self.agent;
        // Only the first iteration may find an execution cut short on the
        // input tape; it is re-run on the tape before it and completed.
        let resume = if self.added.is_empty() && self.iterations == 1 {
            partial_execution(&self.working)
        } else {
            None
        };
        let truncated;
        let base = match resume {
            Some(partial) => {
                truncated = self.working.truncate(partial.start);
                &truncated
            }
            None => &self.working,
        };
        let stack = root.view_stack(base.steps())?;
        let path = stack.active_path().to_string();
        who.agent = path.clone();
        let active = root.find(&path).ok_or_else(|| AgentError::UnknownAgent {
            caller: path.clone(),
            name: path.clone(),
        })?;
        let node_index = match resume {
            Some(partial) => self.resumed_node(active, &path, partial.start)?,
            None => select_node(active, stack.top())?,
        };
        let node = active.nodes()[node_index].clone();
        who.node = node.name().to_string();
        debug!(agent = %path, node = %node.name(), iteration = self.iterations, resumed = resume.is_some(), "running node");
        let ctx = NodeContext {
            root,
            agent: active,
            path: &path,
            stack: &stack,
            node_index,
        };
        let node_error = |source: NodeError| AgentError::Node {
            node: node.name().to_string(),
            source,
        };
        let protocol = |message: &str| AgentError::Protocol {
            node: node.name().to_string(),
            message: message.to_string(),
        };

        let mut prompt = node.make_prompt(&ctx, base).map_err(node_error)?;
        if let Some(partial) = resume {
            let original = &self.working[partial.start].metadata.prompt_id;
            if original.is_some() == prompt.is_null() {
                return Err(protocol("interrupted execution cannot be repeated"));
            }
            if let Some(id) = original {
                prompt.id = id.clone();
            }
        }
        let prompt_id = (!prompt.is_null()).then(|| prompt.id.clone());
        let mut sink = StepSink::new();
        let (result, completion) = {
            let stream = if prompt.is_null() {
                LlmStream::null()
            } else {
                root.client_for(&path, node.llm_slot())?.complete(&prompt)?
            };
            let kind = node.partial_kind().to_string();
            let stream = stream.observe(|text: &str| {
                emit(AgentEvent::PartialStep {
                    kind: kind.clone(),
                    text: text.to_string(),
                })
            });
            let completion = stream.completion();
            (node.generate_steps(&ctx, base, stream, &mut sink), completion)
        };
        let consumed = prompt.is_null() || completion.get().is_some();
        let not_consumed = || AgentError::StreamNotConsumed {
            node: node.name().to_string(),
        };

        let mut steps = match result {
            Err(NodeError::Parse { .. }) | Ok(()) if !consumed => return Err(not_consumed()),
            Err(NodeError::Parse { raw, message }) if prompt_id.is_some() => {
                vec![ParseFailure::new(raw, message).into_step()]
            }
            Err(e) => return Err(node_error(e)),
            Ok(()) => sink.into_steps(),
        };
        if steps.is_empty() {
            if prompt_id.is_none() {
                return Err(protocol("node produced no steps"));
            }
            let raw = completion.get().map(|o| o.content_str().to_string()).unwrap_or_default();
            steps.push(ParseFailure::new(raw, "node produced no steps").into_step());
        }
        self.check_batch(&path, node.name(), &steps)?;

        let stop = steps.iter().any(|s| s.is_action() || s.kind == ParseFailure::KIND);
        let size = steps.len();
        for step in &mut steps {
            let other = std::mem::take(&mut step.metadata.other);
            step.metadata = StepMetadata {
                other,
                ..agent_metadata(&path, node.name(), prompt_id.clone())
            };
        }
        steps[0].metadata.other.insert(BATCH_SIZE_KEY.into(), size.into());
        if let Some(partial) = resume {
            let present = &self.working.steps()[partial.start..];
            if size != partial.size || !steps.iter().zip(present).all(|(a, b)| a.content_eq(b)) {
                return Err(protocol("repeated execution does not match the interrupted one"));
            }
            steps.drain(..partial.present);
        }
        self.working = self.working.append(root.registry(), steps.clone(), root.name())?;
        for step in &steps {
            emit(AgentEvent::Step(step.clone()));
        }
        self.added.extend(steps);
        Ok(if stop { Progress::Stop } else { Progress::Continue })
    }

    /// The node of the interrupted execution starting at `start`, which must
    /// belong to the active agent.
    fn resumed_node(&self, active: &Agent, path: &str, start: usize) -> Result<usize, AgentError> {
        let meta = &self.working[start].metadata;
        if meta.agent != path {
            return Err(AgentError::Protocol {
                node: meta.node.clone(),
                message: format!("interrupted execution belongs to `{}`, not the active `{path}`", meta.agent),
            });
        }
        active.node_index(&meta.node).ok_or_else(|| AgentError::UnknownNode {
            agent: path.to_string(),
            node: meta.node.clone(),
        })
    }

    fn check_batch(&self, path: &str, node: &str, steps: &[Step]) -> Result<(), AgentError> {
        let protocol = |message: String| AgentError::Protocol {
            node: node.to_string(),
            message,
        };
        for (i, step) in steps.iter().enumerate() {
            self.agent.registry().validate(step)?;
            let is_last = i + 1 == steps.len();
            if let Some(call) = Call::from_step(step) {
                if !is_last {
                    return Err(protocol("a call must be the last step of a batch".into()));
                }
                if self.agent.resolve(path, &call.agent_name).is_none() {
                    return Err(AgentError::UnknownAgent {
                        caller: path.to_string(),
                        name: call.agent_name,
                    });
                }
            }
            if step.kind == Respond::KIND {
                if !is_last {
                    return Err(protocol("a respond must be the last step of a batch".into()));
                }
                if !path.contains('/') {
                    return Err(protocol("the root agent has no caller to respond to".into()));
                }
            }
        }
        Ok(())
    }
}
