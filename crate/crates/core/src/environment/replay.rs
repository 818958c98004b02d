use std::sync::Arc;

use super::{pending_calls, EnvError, Environment, DEFAULT_ENV_NAME};
use crate::llm::ToolSchema;
use crate::tape::{Step, StepCategory, StepMetadata, StepRegistry, Tape};

/// Re-emits the observations of a recorded tape by position: calls pending
/// on a tape of length `n` are answered with the recorded steps at `n..`.
pub struct ReplayEnvironment {
    name: String,
    recorded: Tape,
    schemas: Vec<ToolSchema>,
    registry: Arc<StepRegistry>,
}

impl ReplayEnvironment {
    pub fn new(recorded: Tape) -> Self {
        Self {
            name: DEFAULT_ENV_NAME.into(),
            recorded,
            schemas: Vec::new(),
            registry: Arc::new(StepRegistry::default()),
        }
    }

    /// Schemas to report, usually those of the environment that recorded.
    pub fn with_schemas(mut self, schemas: Vec<ToolSchema>) -> Self {
        self.schemas = schemas;
        self
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }
}

impl Environment for ReplayEnvironment {
    fn name(&self) -> &str {
        &self.name
    }

    fn react(&self, tape: &Tape) -> Result<Tape, EnvError> {
        let pending = pending_calls(tape);
        if pending.is_empty() {
            return Ok(tape.clone());
        }
        let start = tape.len();
        let mut observations = Vec::with_capacity(pending.len());
        for (offset, p) in pending.iter().enumerate() {
            let index = start + offset;
            let mismatch = |message: String| EnvError::ObservationMismatch { index, message };
            let step = self
                .recorded
                .steps()
                .get(index)
                .ok_or_else(|| mismatch(format!("the recording ends before call `{}` is answered", p.call.call_id)))?;
            if step.category != StepCategory::Observation || step.str_field("call_id") != Some(p.call.call_id.as_str()) {
                return Err(mismatch(format!(
                    "expected an observation for call `{}`, recorded `{}`",
                    p.call.call_id, step.kind
                )));
            }
            if let Some(tool) = step.str_field("tool_name") {
                if tool != p.call.tool_name {
                    return Err(mismatch(format!(
                        "call `{}` requests `{}`, recording answers `{tool}`",
                        p.call.call_id, p.call.tool_name
                    )));
                }
            }
            observations.push(Step {
                metadata: StepMetadata::fresh(),
                ..step.clone()
            });
        }
        Ok(tape.append(&self.registry, observations, &self.name)?)
    }

    fn tool_schemas(&self) -> Vec<ToolSchema> {
        self.schemas.clone()
    }
}
