//! Background runs with live event fan-out.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use serde_json::{json, Value};
use tapes::agent::{AgentConfig, AgentEvent};
use tapes::environment::EnvConfig;
use tapes::llm::CallDb;
use tapes::orchestrator::{FinishReason, LoopConfig, MainLoopEvent};
use tapes::tape::codec::tape_to_value;
use tapes::tape::new_id;
use tokio::sync::broadcast;
use tracing::{info, warn};

use crate::store::TapeStore;
use crate::{run_session, ServiceError};

const CHANNEL_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunHandle {
    pub run_id: String,
    pub status: RunStatus,
    /// The input tape while running, the final tape afterwards.
    pub tape_id: String,
    pub input_tape_id: String,
    pub agent: AgentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<FinishReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Set when the input tape was forked while the run was going.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conflict: Option<String>,
}

/// One streamed document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEvent {
    #[serde(rename = "type")]
    pub kind: String,
    pub run_id: String,
    pub payload: Value,
}

impl RunEvent {
    pub fn is_terminal(&self) -> bool {
        self.kind == "finished"
    }
}

struct RunState {
    handle: RunHandle,
    /// Step documents of the tape as seen so far.
    steps: Vec<Value>,
    last_event: Option<RunEvent>,
    sender: broadcast::Sender<RunEvent>,
}

impl RunState {
    fn snapshot(&self) -> RunEvent {
        RunEvent {
            kind: "snapshot".into(),
            run_id: self.handle.run_id.clone(),
            payload: json!({"run": self.handle, "steps": self.steps}),
        }
    }

    fn publish(&mut self, kind: &str, payload: Value) {
        let event = RunEvent {
            kind: kind.into(),
            run_id: self.handle.run_id.clone(),
            payload,
        };
        // no subscribers is fine
        let _ = self.sender.send(event.clone());
        self.last_event = Some(event);
    }
}

/// What a new subscriber gets: past state, then live events if the run is
/// still going.
pub struct Subscription {
    pub backlog: Vec<RunEvent>,
    pub live: Option<broadcast::Receiver<RunEvent>>,
}

pub struct RunManager {
    store: Arc<TapeStore>,
    db: Arc<CallDb>,
    runs: Mutex<HashMap<String, Arc<Mutex<RunState>>>>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl RunManager {
    pub fn new(store: Arc<TapeStore>, db: Arc<CallDb>) -> Self {
        Self {
            store,
            db,
            runs: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &Arc<TapeStore> {
        &self.store
    }

    pub fn db(&self) -> &Arc<CallDb> {
        &self.db
    }

    /// Starts `agent` on stored tape `tape_id` in a background thread.
    pub fn start_run(
        &self,
        agent: AgentConfig,
        tape_id: &str,
        env: EnvConfig,
        loop_config: LoopConfig,
    ) -> Result<RunHandle, ServiceError> {
        let input = self.store.load(tape_id)?;
        agent.validate()?;
        env.build()?;
        let known_children = self.store.children(tape_id)?;
        let run_id = new_id();
        let handle = RunHandle {
            run_id: run_id.clone(),
            status: RunStatus::Running,
            tape_id: tape_id.to_string(),
            input_tape_id: tape_id.to_string(),
            agent: agent.clone(),
            reason: None,
            error: None,
            conflict: None,
        };
        let (sender, _) = broadcast::channel(CHANNEL_CAPACITY);
        let state = Arc::new(Mutex::new(RunState {
            handle: handle.clone(),
            steps: input.steps().iter().map(|s| s.to_document()).collect(),
            last_event: None,
            sender,
        }));
        lock(&self.runs).insert(run_id.clone(), state.clone());
        let store = self.store.clone();
        let db = self.db.clone();
        info!(run = %run_id, tape = tape_id, "run started");
        std::thread::spawn(move || {
            let mut forward = |event: &MainLoopEvent| {
                let mut state = lock(&state);
                match event {
                    MainLoopEvent::Agent(AgentEvent::PartialStep { kind, text }) => {
                        state.publish("partial_step", json!({"kind": kind, "text": text}));
                    }
                    MainLoopEvent::Agent(AgentEvent::Step(step)) => {
                        let doc = step.to_document();
                        state.steps.push(doc.clone());
                        state.publish("step", doc);
                    }
                    MainLoopEvent::Agent(AgentEvent::FinalTape(tape)) => {
                        state.publish("agent_tape", tape_to_value(tape));
                    }
                    MainLoopEvent::EnvTape(tape) => {
                        state.steps = tape.steps().iter().map(|s| s.to_document()).collect();
                        state.publish("env_tape", tape_to_value(tape));
                    }
                    // published below, once the tape is stored
                    MainLoopEvent::Finished { .. } => {}
                }
            };
            let result = run_session(&store, db, &agent, &env, &input, loop_config, &mut forward);
            let conflict = match store.children(input.id()) {
                Ok(children) => {
                    let forked: Vec<String> = children
                        .into_iter()
                        .filter(|c| !known_children.contains(c) && result.as_ref().map_or(true, |r| r.tape.id() != c))
                        .collect();
                    (!forked.is_empty()).then(|| {
                        format!("tape `{}` was forked during the run as {}", input.id(), forked.join(", "))
                    })
                }
                Err(_) => None,
            };
            let mut state = lock(&state);
            if let Some(message) = &conflict {
                warn!(run = %state.handle.run_id, %message, "concurrent edit");
                state.publish("conflict", json!({"message": message}));
            }
            state.handle.conflict = conflict;
            match result {
                Ok(session) => {
                    state.handle.status = if session.reason == FinishReason::Error {
                        RunStatus::Failed
                    } else {
                        RunStatus::Finished
                    };
                    state.handle.tape_id = session.tape.id().to_string();
                    state.handle.reason = Some(session.reason);
                    state.handle.error = session.error;
                    state.steps = session.tape.steps().iter().map(|s| s.to_document()).collect();
                }
                Err(error) => {
                    state.handle.status = RunStatus::Failed;
                    state.handle.error = Some(error.to_string());
                }
            }
            info!(run = %state.handle.run_id, status = ?state.handle.status, "run ended");
            let payload = serde_json::to_value(&state.handle).expect("handle serializes");
            state.publish("finished", payload);
        });
        Ok(handle)
    }

    pub fn get(&self, run_id: &str) -> Option<RunHandle> {
        lock(&self.runs).get(run_id).map(|s| lock(s).handle.clone())
    }

    pub fn list(&self) -> Vec<RunHandle> {
        let runs = lock(&self.runs);
        runs.values().map(|s| lock(s).handle.clone()).collect()
    }

    /// A snapshot of the run, followed by live events while it is running.
    pub fn subscribe(&self, run_id: &str) -> Option<Subscription> {
        let state = lock(&self.runs).get(run_id)?.clone();
        let state = lock(&state);
        let snapshot = state.snapshot();
        if state.handle.status == RunStatus::Running {
            Some(Subscription {
                backlog: vec![snapshot],
                live: Some(state.sender.subscribe()),
            })
        } else {
            let mut backlog = vec![snapshot];
            backlog.extend(state.last_event.clone());
            Some(Subscription { backlog, live: None })
        }
    }

    /// Blocks until the run ends. Must not be called from an async task.
    pub fn wait(&self, run_id: &str) -> Option<RunHandle> {
        let mut subscription = self.subscribe(run_id)?;
        if let Some(live) = subscription.live.as_mut() {
            loop {
                match live.blocking_recv() {
                    Ok(event) if event.is_terminal() => break,
                    Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => {}
                    Err(broadcast::error::RecvError::Closed) => break,
                }
            }
        }
        self.get(run_id)
    }
}
