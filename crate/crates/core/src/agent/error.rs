use thiserror::Error;

use crate::llm::LlmError;
use crate::tape::TapeError;

/// Failure inside one node function.
#[derive(Debug, Error)]
pub enum NodeError {
    /// The LLM output could not be turned into steps.
    #[error("cannot parse LLM output: {message}")]
    Parse { raw: String, message: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Step(#[from] TapeError),
    #[error("node `{0}` cannot reconstruct LLM outputs")]
    Unsupported(String),
    #[error("{0}")]
    Other(String),
}

impl NodeError {
    pub fn parse(raw: impl Into<String>, message: impl Into<String>) -> Self {
        NodeError::Parse {
            raw: raw.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
    #[error("agent `{caller}` cannot call unknown agent `{name}`")]
    UnknownAgent { caller: String, name: String },
    #[error("agent `{agent}` has no node `{node}`")]
    UnknownNode { agent: String, node: String },
    #[error("respond at step {index} has no open call")]
    UnbalancedRespond { index: usize },
    #[error("agent `{agent}` has {len} nodes, next node {index} is out of range")]
    NodeOutOfRange { agent: String, index: usize, len: usize },
    #[error("agent `{agent}` ran past its last node without emitting an action")]
    NodeExhausted { agent: String },
    #[error("run exceeded {limit} iterations without an action")]
    Runaway { limit: usize },
    #[error("no LLM configured for slot `{slot}` of agent `{agent}`")]
    MissingLlm { agent: String, slot: String },
    #[error("node `{node}` failed: {source}")]
    Node {
        node: String,
        #[source]
        source: NodeError,
    },
    #[error("node `{node}` did not consume its LLM stream")]
    StreamNotConsumed { node: String },
    #[error("node `{node}` broke the step protocol: {message}")]
    Protocol { node: String, message: String },
    #[error("cannot reconstruct the LLM call at step {index}: {message}")]
    Reconstruction { index: usize, message: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
