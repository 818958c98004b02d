//! Conversational teams in one tape: an initiator hands the task to a
//! manager, which repeatedly picks the worker that speaks next.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::resolve_text;
use crate::agent::{execution_steps, AgentConfig, AgentError, Node, NodeConfig, NodeContext, NodeError, StepSink};
use crate::llm::{LlmOutput, LlmStream, Message, Prompt};
use crate::tape::builtin::{AssistantMessage, Call, Respond, SetNextNode};
use crate::tape::{Step, StepRegistry, Tape};

pub const COMPONENT: &str = "team";
pub const DEFAULT_MAX_TURNS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum TeamRole {
    /// Root of the team: forwards user messages to the manager and relays
    /// its answer back as an assistant message.
    Initiator {
        #[serde(default = "default_manager")]
        manager: String,
    },
    Manager {
        #[serde(default)]
        system_prompt: String,
        team: Vec<String>,
        /// Worker turns before the manager responds to the initiator.
        #[serde(default = "default_max_turns")]
        max_turns: usize,
    },
    Worker {
        #[serde(default)]
        system_prompt: String,
    },
}

fn default_manager() -> String {
    "manager".to_string()
}

fn default_max_turns() -> usize {
    DEFAULT_MAX_TURNS
}

pub struct TeamNode {
    name: String,
    role: TeamRole,
}

pub fn factory(node: &NodeConfig, agent: &AgentConfig, _registry: &StepRegistry) -> Result<Arc<dyn Node>, AgentError> {
    let role: TeamRole = serde_json::from_value(node.params.clone())
        .map_err(|e| AgentError::Config(format!("node `{}`: {e}", node.name)))?;
    match &role {
        TeamRole::Manager { team, .. } if team.is_empty() => {
            return Err(AgentError::Config(format!("manager `{}` has an empty team", agent.name)));
        }
        TeamRole::Initiator { manager } if !agent.subagents.iter().any(|s| &s.name == manager) => {
            return Err(AgentError::Config(format!(
                "initiator `{}` has no subagent `{manager}`",
                agent.name
            )));
        }
        _ => {}
    }
    Ok(Arc::new(TeamNode {
        name: node.name.clone(),
        role,
    }))
}

/// Picks a member: exact name, then case-insensitive containment, then the
/// member after `last` in roster order.
pub fn select_speaker(output: &str, team: &[String], last: Option<usize>) -> usize {
    let text = output.trim();
    if let Some(i) = team.iter().position(|m| m == text) {
        return i;
    }
    let lower = text.to_lowercase();
    if let Some(i) = team.iter().position(|m| lower.contains(&m.to_lowercase())) {
        return i;
    }
    last.map_or(0, |i| (i + 1) % team.len())
}

fn last_segment(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or(path)
}

/// The conversation in a manager's view: the task, then each worker reply.
fn transcript(steps: &[&Step]) -> String {
    steps
        .iter()
        .filter_map(|s| {
            Respond::from_step(s).map(|r| format!("{}: {}", last_segment(&s.metadata.agent), r.content))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn task(steps: &[&Step]) -> String {
    steps
        .first()
        .and_then(|s| Call::from_step(s))
        .map(|c| c.content)
        .unwrap_or_default()
}

fn conversation(steps: &[&Step]) -> String {
    let mut text = format!("Task: {}", task(steps));
    let replies = transcript(steps);
    if !replies.is_empty() {
        text.push('\n');
        text.push_str(&replies);
    }
    text
}

impl TeamNode {
    fn manager_state(&self, ctx: &NodeContext<'_>, tape: &Tape) -> (usize, Option<usize>, String) {
        let TeamRole::Manager { team, .. } = &self.role else {
            return (0, None, String::new());
        };
        let steps = ctx.visible_steps(tape);
        let replies = steps.iter().filter(|s| s.kind == Respond::KIND).count();
        let last = steps
            .iter()
            .rev()
            .filter(|s| s.metadata.agent == ctx.path)
            .find_map(|s| Call::from_step(s))
            .and_then(|c| team.iter().position(|m| *m == c.agent_name));
        let latest = steps
            .iter()
            .rev()
            .find_map(|s| Respond::from_step(s))
            .map(|r| r.content)
            .unwrap_or_else(|| task(&steps));
        (replies, last, latest)
    }
}

impl Node for TeamNode {
    fn name(&self) -> &str {
        &self.name
    }

    fn make_prompt(&self, ctx: &NodeContext<'_>, tape: &Tape) -> Result<Prompt, NodeError> {
        match &self.role {
            TeamRole::Initiator { .. } => Ok(Prompt::null()),
            TeamRole::Manager {
                system_prompt,
                team,
                max_turns,
            } => {
                let (replies, _, _) = self.manager_state(ctx, tape);
                if replies >= *max_turns {
                    return Ok(Prompt::null());
                }
                let system = format!(
                    "{}\n\nTeam members: {}.\nReply with only the name of the member who should speak next.",
                    resolve_text(ctx, system_prompt),
                    team.join(", ")
                );
                let steps = ctx.visible_steps(tape);
                Ok(Prompt::new(vec![Message::system(system.trim_start()), Message::user(conversation(&steps))]))
            }
            TeamRole::Worker { system_prompt } => {
                let caller = ctx.stack.views.len().checked_sub(2).map(|i| &ctx.stack.views[i]);
                let history = match caller {
                    Some(view) => conversation(&view.visible.iter().map(|&i| &tape[i]).collect::<Vec<_>>()),
                    None => String::new(),
                };
                let request = task(&ctx.visible_steps(tape));
                let name = last_segment(ctx.path);
                let mut user = history;
                if !request.is_empty() {
                    user.push_str(&format!("\n\nLatest message: {request}"));
                }
                user.push_str(&format!("\n\nYou are {name}. Write your next message."));
                Ok(Prompt::new(vec![
                    Message::system(resolve_text(ctx, system_prompt)),
                    Message::user(user.trim_start()),
                ]))
            }
        }
    }

    fn generate_steps(
        &self,
        ctx: &NodeContext<'_>,
        tape: &Tape,
        stream: LlmStream<'_>,
        sink: &mut StepSink,
    ) -> Result<(), NodeError> {
        match &self.role {
            TeamRole::Initiator { manager } => {
                let last = ctx.visible_steps(tape).last().copied().cloned();
                sink.push(SetNextNode::new(0).into_step());
                match last.as_ref().and_then(Respond::from_step) {
                    Some(answer) => sink.push(AssistantMessage::new(answer.content).into_step()),
                    None => {
                        let content = last.and_then(|s| s.str_field("content").map(str::to_string)).unwrap_or_default();
                        sink.push(Call::new(manager.clone(), content).into_step());
                    }
                }
            }
            TeamRole::Manager { team, .. } => {
                let (_, last, latest) = self.manager_state(ctx, tape);
                if stream.is_null() {
                    sink.push(Respond::new(latest).into_step());
                    return Ok(());
                }
                let output = stream.into_output()?.unwrap_or_default();
                let speaker = select_speaker(output.content_str(), team, last);
                sink.push(SetNextNode::new(0).into_step());
                sink.push(Call::new(team[speaker].clone(), latest).into_step());
            }
            TeamRole::Worker { .. } => {
                let output = stream.into_output()?.unwrap_or_default();
                sink.push(Respond::new(output.content_str()).into_step());
            }
        }
        Ok(())
    }

    fn make_llm_output(&self, _ctx: &NodeContext<'_>, tape: &Tape, index: usize) -> Result<LlmOutput, NodeError> {
        let steps = execution_steps(tape, index);
        let text = match &self.role {
            TeamRole::Initiator { .. } => return Err(NodeError::Unsupported(self.name.clone())),
            TeamRole::Manager { .. } => steps.iter().find_map(Call::from_step).map(|c| c.agent_name),
            TeamRole::Worker { .. } => steps.iter().find_map(Respond::from_step).map(|r| r.content),
        };
        text.map(LlmOutput::text)
            .ok_or_else(|| NodeError::Other("execution has no step carrying the LLM output".into()))
    }
}
