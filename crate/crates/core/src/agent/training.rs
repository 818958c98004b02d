//! Reconstruction of the LLM calls behind a tape.

use serde::Serialize;

use super::error::{AgentError, NodeError};
use super::node::{execution_steps, NodeContext, StepSink};
use super::tree::Agent;
use crate::llm::{CallDb, Chunking, LlmOutput, LlmStream, Prompt};
use crate::tape::Tape;

/// One reconstructed LLM call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSample {
    pub prompt: Prompt,
    pub output: LlmOutput,
    pub source_tape_id: String,
    pub source_step_indices: Vec<usize>,
    pub agent: String,
    pub node: String,
}

/// Rebuilds every LLM call made while producing `tape`.
///
/// Each prompt is recomputed from the tape prefix before its steps, and each
/// output from the node's `make_llm_output`. A sample is accepted only if
/// feeding its output back through the node regenerates the original steps,
/// and, when `db` holds the original call, the recomputed prompt matches it.
pub fn make_training_text(agent: &Agent, tape: &Tape, db: Option<&CallDb>) -> Result<Vec<TrainingSample>, AgentError> {
    let mut samples = Vec::new();
    let mut index = 0;
    while index < tape.len() {
        let group = execution_steps(tape, index);
        let first = &group[0];
        let (Some(prompt_id), false) = (&first.metadata.prompt_id, first.metadata.agent.is_empty()) else {
            index += group.len();
            continue;
        };
        samples.push(reconstruct(agent, tape, index, group.len(), prompt_id, db)?);
        index += group.len();
    }
    Ok(samples)
}

fn reconstruct(
    root: &Agent,
    tape: &Tape,
    index: usize,
    count: usize,
    prompt_id: &str,
    db: Option<&CallDb>,
) -> Result<TrainingSample, AgentError> {
    let fail = |message: String| AgentError::Reconstruction { index, message };
    let meta = &tape[index].metadata;
    let prefix = tape.truncate(index);
    let stack = root.view_stack(prefix.steps())?;
    if stack.active_path() != meta.agent {
        return Err(fail(format!(
            "agent `{}` was not active before this step (active: `{}`)",
            meta.agent,
            stack.active_path()
        )));
    }
    let agent = root
        .find(&meta.agent)
        .ok_or_else(|| fail(format!("unknown agent `{}`", meta.agent)))?;
    let node_index = agent
        .node_index(&meta.node)
        .ok_or_else(|| fail(format!("agent `{}` has no node `{}`", meta.agent, meta.node)))?;
    let node = &agent.nodes()[node_index];
    let ctx = NodeContext {
        root,
        agent,
        path: &meta.agent,
        stack: &stack,
        node_index,
    };
    let node_failure = |e: NodeError| match e {
        NodeError::Unsupported(node) => AgentError::Node {
            node: node.clone(),
            source: NodeError::Unsupported(node),
        },
        other => fail(other.to_string()),
    };

    let mut prompt = node.make_prompt(&ctx, &prefix).map_err(node_failure)?;
    if prompt.is_null() {
        return Err(fail("node makes a null prompt for this tape".into()));
    }
    prompt.id = prompt_id.to_string();
    let output = node.make_llm_output(&ctx, tape, index).map_err(node_failure)?;

    let stream = LlmStream::from_chunks(Chunking::Words.split(output.content_str()), output.clone(), None);
    let mut sink = StepSink::new();
    node.generate_steps(&ctx, &prefix, stream, &mut sink)
        .map_err(|e| fail(format!("regeneration failed: {e}")))?;
    let regenerated = sink.into_steps();
    let original = &tape.steps()[index..index + count];
    if regenerated.len() != original.len() || !regenerated.iter().zip(original).all(|(a, b)| a.content_eq(b)) {
        return Err(fail("regenerated steps differ from the tape".into()));
    }
    if let Some(db) = db {
        if let Some(record) = db.find(prompt_id)? {
            if !record.prompt.content_eq(&prompt) {
                let at = record.prompt.first_difference(&prompt);
                return Err(fail(format!("recomputed prompt differs from the recorded call at message {at:?}")));
            }
        }
    }
    Ok(TrainingSample {
        prompt,
        output,
        source_tape_id: tape.id().to_string(),
        source_step_indices: (index..index + count).collect(),
        agent: meta.agent.clone(),
        node: meta.node.clone(),
    })
}
