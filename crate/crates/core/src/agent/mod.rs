//! Agents, nodes, tape views and the run loop.

mod config;
mod error;
mod messages;
mod node;
mod runtime;
mod training;
mod tree;
mod view;

pub use config::{AgentConfig, NodeConfig, Template};
pub use error::{AgentError, NodeError};
pub use messages::{render_custom, view_to_messages};
pub use node::{execution_steps, partial_execution, Node, NodeContext, PartialExecution, StepSink, BATCH_SIZE_KEY};
pub use runtime::{run, run_to_end, run_with, AgentEvent, AgentRun, RunConfig, RunFailure, DEFAULT_MAX_ITERATIONS};
pub use training::{make_training_text, TrainingSample};
pub use tree::{select_node, Agent, ComponentRegistry, NodeFactory};
pub use view::{compute_view_stack, CallResolver, ChildPaths, StackViews, TapeView, TapeViewStack, ViewStrategy};
