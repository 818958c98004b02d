//! Chat assistant nodes: a planner that thinks, an actor that answers, calls
//! tools or delegates, and a tool-using helper agent that responds to its
//! caller.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::resolve_text;
use crate::agent::{execution_steps, AgentConfig, AgentError, Node, NodeConfig, NodeContext, NodeError, StepSink};
use crate::llm::{LlmOutput, LlmStream, Message, Prompt, ToolCall, ToolSchema};
use crate::tape::builtin::{AssistantMessage, Call, Respond, SetNextNode, ToolCalls};
use crate::tape::{FieldSpec, FieldType, StepCategory, StepKind, StepRegistry, Tape};

pub const PLAN: &str = "dialog_plan";
pub const ACT: &str = "dialog_act";
pub const HELPER: &str = "dialog_helper";
pub const THOUGHT_KIND: &str = "assistant_thought";

pub fn thought_kind() -> StepKind {
    StepKind::new(
        THOUGHT_KIND,
        StepCategory::Thought,
        vec![FieldSpec::required("content", FieldType::String)],
    )
    .describe("Private reasoning of the assistant")
}

/// A tool exposed to the LLM that is served by calling a subagent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delegate {
    pub agent: String,
    /// Tool argument that becomes the Call content.
    pub argument: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DialogParams {
    #[serde(default)]
    pub system_prompt: String,
    #[serde(default)]
    pub guidance: String,
    #[serde(default)]
    pub tools: Vec<ToolSchema>,
    #[serde(default)]
    pub delegates: BTreeMap<String, Delegate>,
    /// Node to return to after a plain answer.
    #[serde(default)]
    pub plan_node: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Plan,
    Act,
    Helper,
}

pub struct DialogNode {
    name: String,
    role: Role,
    params: DialogParams,
}

fn build(role: Role, node: &NodeConfig, agent: &AgentConfig) -> Result<Arc<dyn Node>, AgentError> {
    let params: DialogParams = if node.params.is_null() {
        DialogParams::default()
    } else {
        serde_json::from_value(node.params.clone())
            .map_err(|e| AgentError::Config(format!("node `{}`: {e}", node.name)))?
    };
    if params.plan_node >= agent.nodes.len() {
        return Err(AgentError::Config(format!(
            "node `{}`: plan_node {} is out of range",
            node.name, params.plan_node
        )));
    }
    Ok(Arc::new(DialogNode {
        name: node.name.clone(),
        role,
        params,
    }))
}

pub fn plan_factory(node: &NodeConfig, agent: &AgentConfig, _: &StepRegistry) -> Result<Arc<dyn Node>, AgentError> {
    build(Role::Plan, node, agent)
}

pub fn act_factory(node: &NodeConfig, agent: &AgentConfig, _: &StepRegistry) -> Result<Arc<dyn Node>, AgentError> {
    build(Role::Act, node, agent)
}

pub fn helper_factory(node: &NodeConfig, agent: &AgentConfig, _: &StepRegistry) -> Result<Arc<dyn Node>, AgentError> {
    build(Role::Helper, node, agent)
}

impl DialogNode {
    fn tool_schemas(&self) -> Vec<ToolSchema> {
        let mut tools = self.params.tools.clone();
        for (name, delegate) in &self.params.delegates {
            tools.push(ToolSchema::with_string_args(
                name,
                &delegate.description,
                &[(delegate.argument.as_str(), "")],
            ));
        }
        tools
    }

    fn output(stream: LlmStream<'_>) -> Result<LlmOutput, NodeError> {
        Ok(stream.into_output()?.unwrap_or_default())
    }

    fn require_text(output: &LlmOutput) -> Result<String, NodeError> {
        let text = output.content_str().trim();
        if text.is_empty() {
            return Err(NodeError::parse("", "expected text output"));
        }
        Ok(text.to_string())
    }
}

fn delegate_content(call: &ToolCall, argument: &str) -> String {
    match serde_json::from_str::<Value>(&call.arguments) {
        Ok(Value::Object(args)) => match args.get(argument) {
            Some(Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => String::new(),
        },
        _ => call.arguments.clone(),
    }
}

impl Node for DialogNode {
    fn name(&self) -> &str {
        &self.name
    }

    fn partial_kind(&self) -> &str {
        match self.role {
            Role::Plan => THOUGHT_KIND,
            Role::Act => AssistantMessage::KIND,
            Role::Helper => Respond::KIND,
        }
    }

    fn make_prompt(&self, ctx: &NodeContext<'_>, tape: &Tape) -> Result<Prompt, NodeError> {
        let mut messages = vec![Message::system(resolve_text(ctx, &self.params.system_prompt))];
        messages.extend(ctx.messages(tape));
        let guidance = resolve_text(ctx, &self.params.guidance);
        if !guidance.is_empty() {
            messages.push(Message::user(guidance));
        }
        Ok(Prompt::new(messages).with_tools(self.tool_schemas()))
    }

    fn generate_steps(
        &self,
        ctx: &NodeContext<'_>,
        _tape: &Tape,
        stream: LlmStream<'_>,
        sink: &mut StepSink,
    ) -> Result<(), NodeError> {
        let output = Self::output(stream)?;
        match self.role {
            Role::Plan => {
                let text = Self::require_text(&output)?;
                sink.push(ctx.registry().step(THOUGHT_KIND, serde_json::json!({ "content": text }))?);
            }
            Role::Act if output.tool_calls.is_empty() => {
                sink.push(SetNextNode::new(self.params.plan_node).into_step());
                sink.push(AssistantMessage::new(Self::require_text(&output)?).into_step());
            }
            Role::Act => {
                sink.push(SetNextNode::new(ctx.node_index).into_step());
                let first_delegate = output
                    .tool_calls
                    .iter()
                    .position(|c| self.params.delegates.contains_key(&c.tool_name));
                match first_delegate {
                    // Plain tool calls that precede a delegation run first;
                    // the delegation is dropped and the LLM asked again.
                    Some(i) if i > 0 => sink.push(ToolCalls::new(output.tool_calls[..i].to_vec()).into_step()),
                    Some(i) => {
                        let call = &output.tool_calls[i];
                        let delegate = &self.params.delegates[&call.tool_name];
                        sink.push(Call::new(delegate.agent.clone(), delegate_content(call, &delegate.argument)).into_step());
                    }
                    None => sink.push(ToolCalls::new(output.tool_calls).into_step()),
                }
            }
            Role::Helper if output.tool_calls.is_empty() => {
                sink.push(Respond::new(Self::require_text(&output)?).into_step());
            }
            Role::Helper => {
                sink.push(ToolCalls::new(output.tool_calls).into_step());
                sink.push(SetNextNode::new(ctx.node_index).into_step());
            }
        }
        Ok(())
    }

    fn make_llm_output(&self, _ctx: &NodeContext<'_>, tape: &Tape, index: usize) -> Result<LlmOutput, NodeError> {
        for step in execution_steps(tape, index) {
            if let Some(calls) = ToolCalls::from_step(step) {
                return Ok(LlmOutput::calls(calls.tool_calls));
            }
            if let Some(call) = Call::from_step(step) {
                let (name, delegate) = self
                    .params
                    .delegates
                    .iter()
                    .find(|(_, d)| d.agent == call.agent_name)
                    .ok_or_else(|| NodeError::Other(format!("no delegate tool calls `{}`", call.agent_name)))?;
                let mut args = serde_json::Map::new();
                args.insert(delegate.argument.clone(), Value::String(call.content));
                return Ok(LlmOutput::calls(vec![ToolCall {
                    call_id: format!("call_{index}"),
                    tool_name: name.clone(),
                    arguments: Value::Object(args).to_string(),
                }]));
            }
            if step.kind == SetNextNode::KIND {
                continue;
            }
            if let Some(text) = step.str_field("content") {
                return Ok(LlmOutput::text(text));
            }
        }
        Err(NodeError::Other("execution has no step carrying the LLM output".into()))
    }
}
