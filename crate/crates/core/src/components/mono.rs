//! Single-node agent that renders the whole view as one prompt and parses
//! structured steps back from the completion.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::resolve_text;
use crate::agent::{execution_steps, AgentConfig, AgentError, Node, NodeConfig, NodeContext, NodeError, StepSink};
use crate::llm::{LlmOutput, LlmStream, Message, Prompt};
use crate::tape::builtin::SetNextNode;
use crate::tape::codec::{to_canonical_pretty, to_canonical_string};
use crate::tape::{Step, StepRegistry, Tape};

pub const COMPONENT: &str = "mono";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonoParams {
    /// Literal text or the name of a text template.
    #[serde(default)]
    pub system_template: String,
    #[serde(default)]
    pub guidance: String,
    pub allowed_steps: Vec<String>,
    /// When set, each batch starts with a jump to this node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_node_hint: Option<usize>,
    #[serde(default = "default_slot")]
    pub llm: String,
}

fn default_slot() -> String {
    "default".to_string()
}

pub struct MonoNode {
    name: String,
    params: MonoParams,
}

pub fn factory(node: &NodeConfig, _agent: &AgentConfig, registry: &StepRegistry) -> Result<Arc<dyn Node>, AgentError> {
    let params: MonoParams = serde_json::from_value(node.params.clone())
        .map_err(|e| AgentError::Config(format!("node `{}`: {e}", node.name)))?;
    check_allowed(registry, &params.allowed_steps)
        .map_err(|e| AgentError::Config(format!("node `{}`: {e}", node.name)))?;
    Ok(Arc::new(MonoNode {
        name: node.name.clone(),
        params,
    }))
}

fn check_allowed(registry: &StepRegistry, allowed: &[String]) -> Result<(), String> {
    if allowed.is_empty() {
        return Err("allowed_steps is empty".into());
    }
    match allowed.iter().find(|k| !registry.contains(k)) {
        Some(kind) => Err(format!("allowed step kind `{kind}` is not registered")),
        None => Ok(()),
    }
}

/// One step as the kind name over its compact payload.
pub fn render_step(step: &Step) -> String {
    format!("{}\n{}", step.kind, to_canonical_string(&Value::Object(step.payload.clone())))
}

/// The prompt for a view: system text, one message per visible step, the
/// schemas of the allowed kinds and the guidance.
pub fn mono_prompt(
    registry: &StepRegistry,
    system: &str,
    guidance: &str,
    allowed: &[String],
    steps: &[&Step],
    agent_path: &str,
) -> Result<Prompt, String> {
    check_allowed(registry, allowed)?;
    let mut messages = vec![Message::system(system)];
    for step in steps.iter().filter(|s| s.kind != SetNextNode::KIND) {
        let text = render_step(step);
        messages.push(if step.metadata.agent == agent_path {
            Message::assistant(text)
        } else {
            Message::user(text)
        });
    }
    let schemas: Vec<Value> = allowed
        .iter()
        .filter_map(|k| registry.get(k))
        .map(|k| k.to_prompt_schema())
        .collect();
    messages.push(Message::user(format!(
        "Reply with one JSON object, or a JSON list of objects, each matching one of these step schemas:\n{}",
        to_canonical_pretty(&Value::Array(schemas)).trim_end()
    )));
    messages.push(Message::user(guidance));
    Ok(Prompt::new(messages))
}

/// Parses a completion into steps of the allowed kinds. At most one action
/// is accepted.
pub fn parse_steps(registry: &StepRegistry, allowed: &[String], raw: &str) -> Result<Vec<Step>, String> {
    let text = strip_fences(raw);
    let value: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    let items = match value {
        Value::Array(items) => items,
        object @ Value::Object(_) => vec![object],
        _ => return Err("expected a JSON object or list of objects".into()),
    };
    if items.is_empty() {
        return Err("no steps in output".into());
    }
    let mut steps = Vec::with_capacity(items.len());
    for item in items {
        let Value::Object(mut payload) = item else {
            return Err("every step must be a JSON object".into());
        };
        let kind = match payload.remove("kind") {
            Some(Value::String(kind)) => kind,
            _ => return Err("step without a string `kind`".into()),
        };
        if !allowed.contains(&kind) {
            return Err(format!("step kind `{kind}` is not allowed here"));
        }
        steps.push(registry.step(&kind, Value::Object(payload)).map_err(|e| e.to_string())?);
    }
    if steps.iter().filter(|s| s.is_action()).count() > 1 {
        return Err("more than one action in output".into());
    }
    Ok(steps)
}

fn strip_fences(raw: &str) -> &str {
    let text = raw.trim();
    let Some(body) = text.strip_prefix("```") else {
        return text;
    };
    let body = body.split_once('\n').map_or("", |(_, rest)| rest);
    body.strip_suffix("```").unwrap_or(body).trim()
}

impl Node for MonoNode {
    fn name(&self) -> &str {
        &self.name
    }

    fn llm_slot(&self) -> &str {
        &self.params.llm
    }

    fn make_prompt(&self, ctx: &NodeContext<'_>, tape: &Tape) -> Result<Prompt, NodeError> {
        let system = resolve_text(ctx, &self.params.system_template);
        let guidance = resolve_text(ctx, &self.params.guidance);
        mono_prompt(
            ctx.registry(),
            &system,
            &guidance,
            &self.params.allowed_steps,
            &ctx.visible_steps(tape),
            ctx.path,
        )
        .map_err(NodeError::Other)
    }

    fn generate_steps(
        &self,
        ctx: &NodeContext<'_>,
        _tape: &Tape,
        stream: LlmStream<'_>,
        sink: &mut StepSink,
    ) -> Result<(), NodeError> {
        let output = stream.into_output()?.unwrap_or_default();
        let raw = output.content_str();
        let steps = parse_steps(ctx.registry(), &self.params.allowed_steps, raw).map_err(|e| NodeError::parse(raw, e))?;
        if let Some(next) = self.params.next_node_hint {
            sink.push(SetNextNode::new(next).into_step());
        }
        sink.extend(steps);
        Ok(())
    }

    fn make_llm_output(&self, _ctx: &NodeContext<'_>, tape: &Tape, index: usize) -> Result<LlmOutput, NodeError> {
        let mut steps = execution_steps(tape, index);
        if self.params.next_node_hint.is_some() {
            steps = steps.get(1..).unwrap_or_default();
        }
        let docs: Vec<Value> = steps
            .iter()
            .map(|s| {
                let mut doc = s.payload.clone();
                doc.insert("kind".into(), Value::String(s.kind.clone()));
                Value::Object(doc)
            })
            .collect();
        let value = match <[Value; 1]>::try_from(docs) {
            Ok([one]) => one,
            Err(many) => Value::Array(many),
        };
        Ok(LlmOutput::text(to_canonical_string(&value)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::builtin::{AssistantMessage, UserMessage};

    fn allowed(kinds: &[&str]) -> Vec<String> {
        kinds.iter().map(|k| k.to_string()).collect()
    }

    #[test]
    fn empty_view_has_three_sections() {
        let registry = StepRegistry::default();
        let prompt = mono_prompt(&registry, "sys", "go", &allowed(&["assistant_message"]), &[], "a").unwrap();
        assert_eq!(prompt.messages.len(), 3);
        assert!(prompt.messages[1].content.contains("\"assistant_message\""));
        assert_eq!(prompt.messages[2].content, "go");
    }

    #[test]
    fn steps_render_in_order() {
        let registry = StepRegistry::default();
        let a = UserMessage::new("first").into_step();
        let b = UserMessage::new("second").into_step();
        let prompt = mono_prompt(&registry, "sys", "go", &allowed(&["assistant_message"]), &[&a, &b], "a").unwrap();
        assert_eq!(prompt.messages.len(), 5);
        assert!(prompt.messages[1].content.contains("first"));
        assert!(prompt.messages[2].content.contains("second"));
    }

    #[test]
    fn unknown_allowed_kind_is_rejected() {
        let registry = StepRegistry::default();
        assert!(mono_prompt(&registry, "s", "g", &allowed(&["nope"]), &[], "a").is_err());
    }

    #[test]
    fn parses_objects_lists_and_fences() {
        let registry = StepRegistry::default();
        let kinds = allowed(&["assistant_message"]);
        let steps = parse_steps(&registry, &kinds, r#"{"kind":"assistant_message","content":"hi"}"#).unwrap();
        assert_eq!(AssistantMessage::from_step(&steps[0]).unwrap().content, "hi");
        let fenced = "```json\n[{\"kind\":\"assistant_message\",\"content\":\"x\"}]\n```";
        assert_eq!(parse_steps(&registry, &kinds, fenced).unwrap().len(), 1);
        assert!(parse_steps(&registry, &kinds, "not json").is_err());
        assert!(parse_steps(&registry, &kinds, r#"{"kind":"user_message","content":"x"}"#).is_err());
        assert!(parse_steps(&registry, &kinds, r#"{"kind":"assistant_message"}"#).is_err());
        let two = r#"[{"kind":"assistant_message","content":"a"},{"kind":"assistant_message","content":"b"}]"#;
        assert!(parse_steps(&registry, &kinds, two).is_err());
    }
}
