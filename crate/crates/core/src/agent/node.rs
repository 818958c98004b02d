use crate::llm::{LlmOutput, LlmStream, Message, Prompt};
use crate::tape::{Step, StepRegistry, Tape};

use super::config::Template;
use super::error::NodeError;
use super::messages::view_to_messages;
use super::tree::Agent;
use super::view::{TapeView, TapeViewStack};

/// Everything a node may read while it runs.
#[derive(Clone, Copy)]
pub struct NodeContext<'a> {
    pub root: &'a Agent,
    pub agent: &'a Agent,
    /// Path of `agent` in the tree.
    pub path: &'a str,
    pub stack: &'a TapeViewStack,
    pub node_index: usize,
}

impl<'a> NodeContext<'a> {
    pub fn view(&self) -> &'a TapeView {
        self.stack.top()
    }

    pub fn registry(&self) -> &'a StepRegistry {
        self.root.registry()
    }

    pub fn visible_steps<'t>(&self, tape: &'t Tape) -> Vec<&'t Step> {
        self.view().visible.iter().map(|&i| &tape[i]).collect()
    }

    /// The visible steps rendered as chat messages.
    pub fn messages(&self, tape: &Tape) -> Vec<Message> {
        view_to_messages(self.view(), tape, self.path)
    }

    /// Template `name` from this agent or its closest ancestor.
    pub fn template(&self, name: &str) -> Option<&'a Template> {
        let mut path = self.path;
        loop {
            if let Some(t) = self.root.find(path).and_then(|a| a.config().templates.get(name)) {
                return Some(t);
            }
            path = path.rsplit_once('/')?.0;
        }
    }
}

/// Collects the steps a node generates.
#[derive(Debug, Default)]
pub struct StepSink {
    steps: Vec<Step>,
}

impl StepSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: Step) {
        self.steps.push(step);
    }

    pub fn extend(&mut self, steps: impl IntoIterator<Item = Step>) {
        self.steps.extend(steps);
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn into_steps(self) -> Vec<Step> {
        self.steps
    }
}

/// The smallest unit of agent reasoning: one prompt, one parse.
///
/// Implementations must be deterministic: the same context, tape and LLM
/// output always give the same prompt and steps.
pub trait Node: Send + Sync {
    fn name(&self) -> &str;

    /// Which LLM of the agent this node talks to.
    fn llm_slot(&self) -> &str {
        "default"
    }

    /// Label for partial-step events while output streams in.
    fn partial_kind(&self) -> &str {
        "llm_output"
    }

    /// Defaults to the null prompt, which skips the LLM call.
    fn make_prompt(&self, _ctx: &NodeContext<'_>, _tape: &Tape) -> Result<Prompt, NodeError> {
        Ok(Prompt::null())
    }

    /// Turns the LLM output into steps. The stream must be consumed when it
    /// is not null.
    fn generate_steps(
        &self,
        ctx: &NodeContext<'_>,
        tape: &Tape,
        stream: LlmStream<'_>,
        sink: &mut StepSink,
    ) -> Result<(), NodeError>;

    /// The LLM output that would make this node generate the steps that
    /// start at `index` of `tape`. `ctx` is computed on the tape prefix
    /// before `index`.
    fn make_llm_output(&self, _ctx: &NodeContext<'_>, _tape: &Tape, _index: usize) -> Result<LlmOutput, NodeError> {
        Err(NodeError::Unsupported(self.name().to_string()))
    }
}

/// The steps of the node execution that starts at `index`: the maximal run
/// of steps sharing its agent, node and prompt id.
pub fn execution_steps(tape: &Tape, index: usize) -> &[Step] {
    let steps = tape.steps();
    let Some(first) = steps.get(index) else {
        return &[];
    };
    let key = |s: &Step| {
        (
            s.metadata.agent.clone(),
            s.metadata.node.clone(),
            s.metadata.prompt_id.clone(),
        )
    };
    let first_key = key(first);
    let end = steps[index..]
        .iter()
        .position(|s| key(s) != first_key)
        .map_or(steps.len(), |n| index + n);
    &steps[index..end]
}

/// Metadata key on the first step of a node execution holding the number of
/// steps the execution produced.
pub const BATCH_SIZE_KEY: &str = "batch_size";

/// A node execution at the end of a tape that was cut short.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartialExecution {
    /// Index of the execution's first step.
    pub start: usize,
    /// Steps of the execution present on the tape.
    pub present: usize,
    /// Steps the execution produced originally.
    pub size: usize,
}

/// Finds a trailing node execution with fewer steps than it produced.
pub fn partial_execution(tape: &Tape) -> Option<PartialExecution> {
    let steps = tape.steps();
    let start = steps
        .iter()
        .rposition(|s| s.metadata.other.contains_key(BATCH_SIZE_KEY))?;
    let first = &steps[start];
    let size = usize::try_from(first.metadata.other.get(BATCH_SIZE_KEY)?.as_u64()?).ok()?;
    let same_execution = steps[start..].iter().all(|s| {
        s.metadata.agent == first.metadata.agent
            && s.metadata.node == first.metadata.node
            && s.metadata.prompt_id == first.metadata.prompt_id
    });
    let present = steps.len() - start;
    (same_execution && present < size).then_some(PartialExecution { start, present, size })
}
