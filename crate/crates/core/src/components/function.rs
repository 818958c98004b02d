//! Function-style prompt templates: named inputs in, named outputs back.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::agent::{
    execution_steps, AgentConfig, AgentError, Node, NodeConfig, NodeContext, NodeError, StepSink,
};
use crate::llm::{LlmOutput, LlmStream, Message, Prompt, ToolCall};
use crate::tape::builtin::{SetNextNode, ToolCalls};
use crate::tape::{Step, StepRegistry, Tape};

pub const BLOCK_SEPARATOR: &str = "\n\n---\n\n";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FunctionError {
    #[error("no value bound for input `{0}`")]
    MissingBinding(String),
    #[error("completion lacks the `{0}` label")]
    MissingOutput(String),
    #[error("template `{template}` has no field `{field}`")]
    UnknownField { template: String, field: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    /// Label shown before the value; defaults to the capitalized name.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub prefix: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub desc: String,
}

impl FieldDef {
    pub fn new(name: &str, prefix: &str, desc: &str) -> Self {
        Self {
            name: name.into(),
            prefix: prefix.into(),
            desc: desc.into(),
        }
    }

    pub fn label(&self) -> String {
        if !self.prefix.is_empty() {
            return self.prefix.clone();
        }
        let mut chars = self.name.chars();
        match chars.next() {
            Some(first) => first.to_uppercase().chain(chars).collect::<String>().replace('_', " "),
            None => String::new(),
        }
    }
}

/// Recorded input/output values for one use of a template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub bindings: BTreeMap<String, String>,
    #[serde(default)]
    pub source_tape_id: String,
    #[serde(default)]
    pub source_prompt_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmFunctionTemplate {
    pub name: String,
    pub instruction: String,
    pub inputs: Vec<FieldDef>,
    pub outputs: Vec<FieldDef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demos: Vec<Demonstration>,
}

impl LlmFunctionTemplate {
    pub fn new(name: &str, instruction: &str, inputs: Vec<FieldDef>, outputs: Vec<FieldDef>) -> Self {
        Self {
            name: name.into(),
            instruction: instruction.into(),
            inputs,
            outputs,
            demos: Vec::new(),
        }
    }

    fn field_lines(fields: &[FieldDef], bindings: &BTreeMap<String, String>) -> Result<Vec<String>, FunctionError> {
        fields
            .iter()
            .map(|f| {
                let value = bindings
                    .get(&f.name)
                    .ok_or_else(|| FunctionError::MissingBinding(f.name.clone()))?;
                Ok(format!("{}: {}", f.label(), value))
            })
            .collect()
    }

    fn demo_block(&self, demo: &Demonstration) -> Result<String, FunctionError> {
        let mut lines = Self::field_lines(&self.inputs, &demo.bindings)?;
        lines.extend(Self::field_lines(&self.outputs, &demo.bindings)?);
        Ok(lines.join("\n"))
    }

    /// Instruction as the system message; demos then the live inputs as the
    /// user message, ending with the first output label left open.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<Prompt, FunctionError> {
        let mut blocks = self
            .demos
            .iter()
            .map(|d| self.demo_block(d))
            .collect::<Result<Vec<_>, _>>()?;
        let mut live = Self::field_lines(&self.inputs, bindings)?;
        if let Some(first) = self.outputs.first() {
            live.push(format!("{}:", first.label()));
        }
        blocks.push(live.join("\n"));
        Ok(Prompt::new(vec![
            Message::system(self.instruction.clone()),
            Message::user(blocks.join(BLOCK_SEPARATOR)),
        ]))
    }

    /// Completion text that `parse` maps back to `outputs`.
    pub fn format_outputs(&self, outputs: &BTreeMap<String, String>) -> Result<String, FunctionError> {
        Ok(Self::field_lines(&self.outputs, outputs)?.join("\n"))
    }

    /// Splits a completion into output values by their labels, in order.
    /// The first label may be omitted since the prompt already ends with it.
    pub fn parse(&self, completion: &str) -> Result<BTreeMap<String, String>, FunctionError> {
        let mut out = BTreeMap::new();
        let Some((first, rest)) = self.outputs.split_first() else {
            return Ok(out);
        };
        let mut remaining = completion.trim_start();
        let first_label = format!("{}:", first.label());
        if let Some(stripped) = remaining.strip_prefix(&first_label) {
            remaining = stripped;
        }
        let mut current = first;
        for next in rest {
            let marker = format!("\n{}:", next.label());
            let at = remaining
                .find(&marker)
                .ok_or_else(|| FunctionError::MissingOutput(next.label()))?;
            out.insert(current.name.clone(), remaining[..at].trim().to_string());
            remaining = &remaining[at + marker.len()..];
            current = next;
        }
        out.insert(current.name.clone(), remaining.trim().to_string());
        Ok(out)
    }

    /// Recovers the live input bindings from a prompt made by `render`.
    pub fn parse_inputs(&self, prompt: &Prompt) -> Result<BTreeMap<String, String>, FunctionError> {
        let user = prompt.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        let live = user.rsplit(BLOCK_SEPARATOR).next().unwrap_or("");
        let mut out = BTreeMap::new();
        let mut remaining = live;
        for (i, field) in self.inputs.iter().enumerate() {
            let label = format!("{}: ", field.label());
            let start = if i == 0 {
                remaining.strip_prefix(&label).map(|r| r.len())
            } else {
                None
            };
            remaining = match start {
                Some(len) => &remaining[remaining.len() - len..],
                None => {
                    let marker = format!("\n{label}");
                    let at = remaining
                        .find(&marker)
                        .ok_or_else(|| FunctionError::MissingBinding(field.name.clone()))?;
                    if i > 0 {
                        let prev = &self.inputs[i - 1];
                        out.insert(prev.name.clone(), remaining[..at].to_string());
                    }
                    &remaining[at + marker.len()..]
                }
            };
        }
        if let Some(last) = self.inputs.last() {
            let end = match self.outputs.first() {
                Some(first) => remaining
                    .rfind(&format!("\n{}:", first.label()))
                    .unwrap_or(remaining.len()),
                None => remaining.len(),
            };
            out.insert(last.name.clone(), remaining[..end].to_string());
        }
        Ok(out)
    }

    pub fn has_field(&self, name: &str) -> bool {
        self.inputs.iter().chain(&self.outputs).any(|f| f.name == name)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Select {
    First,
    #[default]
    Last,
    /// All matches joined by blank lines.
    All,
}

/// Where an input value comes from: a payload field of visible steps of a
/// given kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSource {
    pub kind: String,
    #[serde(default = "content_field")]
    pub field: String,
    #[serde(default)]
    pub select: Select,
}

fn content_field() -> String {
    "content".to_string()
}

/// How outputs become steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputStep {
    /// One `tool_calls` step calling `tool` with arguments taken from outputs.
    Tool {
        tool: String,
        arguments: BTreeMap<String, String>,
    },
    /// A step of `kind` whose payload fields are taken from outputs.
    Step {
        kind: String,
        fields: BTreeMap<String, String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionNodeParams {
    pub template: String,
    pub inputs: BTreeMap<String, InputSource>,
    pub steps: Vec<OutputStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_node: Option<usize>,
    #[serde(default = "default_slot")]
    pub llm: String,
}

fn default_slot() -> String {
    "default".to_string()
}

/// Node that fills a function template from the tape and turns its outputs
/// into steps.
pub struct LlmFunctionNode {
    name: String,
    params: FunctionNodeParams,
}

pub const COMPONENT: &str = "llm_function";

pub fn factory(node: &NodeConfig, agent: &AgentConfig, registry: &StepRegistry) -> Result<Arc<dyn Node>, AgentError> {
    let params: FunctionNodeParams = serde_json::from_value(node.params.clone())
        .map_err(|e| AgentError::Config(format!("node `{}`: {e}", node.name)))?;
    let bad = |message: String| AgentError::Config(format!("node `{}`: {message}", node.name));
    if let Some(template) = agent.templates.get(&params.template) {
        let Some(template) = template.as_function() else {
            return Err(bad(format!("template `{}` is not a function template", params.template)));
        };
        for name in params.inputs.keys() {
            if !template.inputs.iter().any(|f| &f.name == name) {
                return Err(bad(format!("template has no input `{name}`")));
            }
        }
        let referenced: Vec<&String> = params
            .steps
            .iter()
            .flat_map(|s| match s {
                OutputStep::Tool { arguments, .. } => arguments.values(),
                OutputStep::Step { fields, .. } => fields.values(),
            })
            .collect();
        if let Some(name) = referenced.iter().find(|n| !template.outputs.iter().any(|f| &&f.name == *n)) {
            return Err(bad(format!("template has no output `{name}`")));
        }
    }
    for step in &params.steps {
        if let OutputStep::Step { kind, .. } = step {
            if !registry.contains(kind) {
                return Err(bad(format!("unknown step kind `{kind}`")));
            }
        }
    }
    Ok(Arc::new(LlmFunctionNode {
        name: node.name.clone(),
        params,
    }))
}

impl LlmFunctionNode {
    fn template<'a>(&self, ctx: &NodeContext<'a>) -> Result<&'a LlmFunctionTemplate, NodeError> {
        ctx.template(&self.params.template)
            .and_then(|t| t.as_function())
            .ok_or_else(|| NodeError::Other(format!("function template `{}` not found", self.params.template)))
    }

    fn bindings(&self, ctx: &NodeContext<'_>, tape: &Tape) -> Result<BTreeMap<String, String>, NodeError> {
        let visible = ctx.visible_steps(tape);
        let mut out = BTreeMap::new();
        for (name, source) in &self.params.inputs {
            let values: Vec<String> = visible
                .iter()
                .filter(|s| s.kind == source.kind)
                .filter_map(|s| s.field(&source.field))
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            let value = match source.select {
                Select::First => values.first().cloned(),
                Select::Last => values.last().cloned(),
                Select::All => (!values.is_empty()).then(|| values.join("\n\n")),
            };
            let value = value.ok_or_else(|| NodeError::Other(FunctionError::MissingBinding(name.clone()).to_string()))?;
            out.insert(name.clone(), value);
        }
        Ok(out)
    }

    fn build_steps(
        &self,
        registry: &StepRegistry,
        outputs: &BTreeMap<String, String>,
        tape: &Tape,
    ) -> Result<Vec<Step>, NodeError> {
        let get = |name: &String| {
            outputs
                .get(name)
                .cloned()
                .ok_or_else(|| NodeError::Other(format!("missing output `{name}`")))
        };
        let mut steps = Vec::new();
        if let Some(next) = self.params.next_node {
            steps.push(SetNextNode::new(next).into_step());
        }
        for (i, spec) in self.params.steps.iter().enumerate() {
            match spec {
                OutputStep::Tool { tool, arguments } => {
                    let mut args = Map::new();
                    for (arg, output) in arguments {
                        args.insert(arg.clone(), Value::String(get(output)?));
                    }
                    let call = ToolCall {
                        call_id: format!("call_{}_{}", tape.len(), i),
                        tool_name: tool.clone(),
                        arguments: Value::Object(args).to_string(),
                    };
                    steps.push(ToolCalls::new(vec![call]).into_step());
                }
                OutputStep::Step { kind, fields } => {
                    let mut payload = Map::new();
                    for (field, output) in fields {
                        payload.insert(field.clone(), Value::String(get(output)?));
                    }
                    steps.push(registry.step(kind, Value::Object(payload))?);
                }
            }
        }
        Ok(steps)
    }
}

impl Node for LlmFunctionNode {
    fn name(&self) -> &str {
        &self.name
    }

    fn llm_slot(&self) -> &str {
        &self.params.llm
    }

    fn make_prompt(&self, ctx: &NodeContext<'_>, tape: &Tape) -> Result<Prompt, NodeError> {
        let template = self.template(ctx)?;
        let bindings = self.bindings(ctx, tape)?;
        template.render(&bindings).map_err(|e| NodeError::Other(e.to_string()))
    }

    fn generate_steps(
        &self,
        ctx: &NodeContext<'_>,
        tape: &Tape,
        stream: LlmStream<'_>,
        sink: &mut StepSink,
    ) -> Result<(), NodeError> {
        let template = self.template(ctx)?;
        let output = stream.into_output()?.unwrap_or_default();
        let raw = output.content_str();
        let outputs = template.parse(raw).map_err(|e| NodeError::parse(raw, e.to_string()))?;
        sink.extend(self.build_steps(ctx.registry(), &outputs, tape)?);
        Ok(())
    }

    fn make_llm_output(&self, ctx: &NodeContext<'_>, tape: &Tape, index: usize) -> Result<LlmOutput, NodeError> {
        let template = self.template(ctx)?;
        let mut steps = execution_steps(tape, index).iter();
        if self.params.next_node.is_some() {
            steps.next();
        }
        let mut outputs = BTreeMap::new();
        for spec in &self.params.steps {
            let step = steps
                .next()
                .ok_or_else(|| NodeError::Other("fewer steps than the node emits".into()))?;
            match spec {
                OutputStep::Tool { arguments, .. } => {
                    let calls = ToolCalls::from_step(step)
                        .ok_or_else(|| NodeError::Other(format!("expected tool_calls, found {}", step.kind)))?;
                    let args: Map<String, Value> = calls
                        .tool_calls
                        .first()
                        .and_then(|c| serde_json::from_str(&c.arguments).ok())
                        .unwrap_or_default();
                    for (arg, output) in arguments {
                        if let Some(Value::String(v)) = args.get(arg) {
                            outputs.insert(output.clone(), v.clone());
                        }
                    }
                }
                OutputStep::Step { fields, .. } => {
                    for (field, output) in fields {
                        if let Some(v) = step.str_field(field) {
                            outputs.insert(output.clone(), v.to_string());
                        }
                    }
                }
            }
        }
        let text = template
            .format_outputs(&outputs)
            .map_err(|e| NodeError::Other(format!("cannot rebuild completion: {e}")))?;
        Ok(LlmOutput::text(text))
    }
}
