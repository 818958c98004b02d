use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tracing::debug;

use super::{call_failure, call_result, pending_calls, EnvError, Environment};
use crate::llm::ToolSchema;
use crate::tape::builtin::{ToolCall, ToolResult};
use crate::tape::codec::to_canonical_string;
use crate::tape::{Step, StepRegistry, Tape};

/// Structured result plus the text shown to the LLM.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutput {
    pub result: Value,
    pub text: String,
}

impl ToolOutput {
    pub fn new(result: Value, text: impl Into<String>) -> Self {
        Self {
            result,
            text: text.into(),
        }
    }
}

/// What an executor may look at besides its arguments.
pub struct ToolContext<'a> {
    pub tape: &'a Tape,
    /// Observations already produced earlier in the same reaction.
    pub earlier: &'a [Step],
}

type Executor = Arc<dyn Fn(&Map<String, Value>, &ToolContext<'_>) -> Result<ToolOutput, String> + Send + Sync>;

#[derive(Clone)]
pub struct Tool {
    pub schema: ToolSchema,
    executor: Executor,
}

impl Tool {
    pub fn new(
        schema: ToolSchema,
        executor: impl Fn(&Map<String, Value>, &ToolContext<'_>) -> Result<ToolOutput, String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            schema,
            executor: Arc::new(executor),
        }
    }

    pub fn name(&self) -> &str {
        &self.schema.name
    }

    /// Runs the tool. Errors and panics both become failure reasons.
    fn execute(&self, args: &Map<String, Value>, ctx: &ToolContext<'_>) -> Result<ToolOutput, String> {
        match catch_unwind(AssertUnwindSafe(|| (self.executor)(args, ctx))) {
            Ok(result) => result,
            Err(panic) => {
                let message = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "unknown panic".into());
                Err(format!("tool `{}` crashed: {message}", self.name()))
            }
        }
    }
}

/// Tools by name, in registration order.
#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: IndexMap<String, Tool>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tool: Tool) -> Result<(), EnvError> {
        if self.tools.contains_key(tool.name()) {
            return Err(EnvError::DuplicateTool(tool.name().to_string()));
        }
        self.tools.insert(tool.name().to_string(), tool);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tool> {
        self.tools.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.keys().map(String::as_str).collect()
    }

    pub fn schemas(&self) -> Vec<ToolSchema> {
        self.tools.values().map(|t| t.schema.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// The observation answering `call`.
    pub fn execute(&self, call: &ToolCall, ctx: &ToolContext<'_>) -> Step {
        let Some(tool) = self.get(&call.tool_name) else {
            return call_failure(call, format!("unknown tool `{}`", call.tool_name));
        };
        let args = match serde_json::from_str::<Value>(if call.arguments.trim().is_empty() {
            "{}"
        } else {
            &call.arguments
        }) {
            Ok(Value::Object(args)) => args,
            Ok(_) => return call_failure(call, "tool arguments must be a JSON object"),
            Err(e) => return call_failure(call, format!("invalid tool arguments: {e}")),
        };
        match tool.execute(&args, ctx) {
            Ok(output) => call_result(call, output),
            Err(reason) => call_failure(call, reason),
        }
    }
}

/// Environment that serves tool calls from a [`ToolRegistry`].
#[derive(Clone)]
pub struct ToolEnvironment {
    name: String,
    tools: ToolRegistry,
    registry: Arc<StepRegistry>,
}

pub const DEFAULT_ENV_NAME: &str = "environment";

impl ToolEnvironment {
    pub fn new(tools: ToolRegistry) -> Self {
        Self {
            name: DEFAULT_ENV_NAME.into(),
            tools,
            registry: Arc::new(StepRegistry::default()),
        }
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn tools(&self) -> &ToolRegistry {
        &self.tools
    }
}

impl Environment for ToolEnvironment {
    fn name(&self) -> &str {
        &self.name
    }

    fn react(&self, tape: &Tape) -> Result<Tape, EnvError> {
        let pending = pending_calls(tape);
        if pending.is_empty() {
            return Ok(tape.clone());
        }
        let mut observations = Vec::with_capacity(pending.len());
        for p in &pending {
            let ctx = ToolContext {
                tape,
                earlier: &observations,
            };
            let step = self.tools.execute(&p.call, &ctx);
            debug!(tool = %p.call.tool_name, call_id = %p.call.call_id, kind = %step.kind, "tool call served");
            observations.push(step);
        }
        Ok(tape.append(&self.registry, observations, &self.name)?)
    }

    fn tool_schemas(&self) -> Vec<ToolSchema> {
        self.tools.schemas()
    }
}

fn string_arg<'a>(args: &'a Map<String, Value>, name: &str) -> Result<&'a str, String> {
    args.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("missing string argument `{name}`"))
}

/// Integral values print without a fractional part.
pub fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Arithmetic expression evaluator.
pub fn calculator(name: &str) -> Tool {
    let schema = ToolSchema::with_string_args(
        name,
        "Evaluate an arithmetic expression",
        &[("expression", "Expression such as (2+3)*4")],
    );
    Tool::new(schema, |args, _| {
        let expression = string_arg(args, "expression")?;
        let value = meval::eval_str(expression).map_err(|e| format!("cannot evaluate `{expression}`: {e}"))?;
        if !value.is_finite() {
            return Err(format!("`{expression}` has no finite value"));
        }
        let result = serde_json::Number::from_f64(value).map_or(Value::Null, Value::Number);
        Ok(ToolOutput::new(result, format_number(value)))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub title: String,
    pub text: String,
}

/// Documents for the mock search tool.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    records: Vec<CorpusRecord>,
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl Corpus {
    pub fn new(records: Vec<CorpusRecord>) -> Self {
        Self { records }
    }

    /// Reads newline-delimited `{id, title, text}` records.
    pub fn parse(text: &str) -> Result<Self, String> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, line)| !line.trim().is_empty())
            .map(|(n, line)| serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1)))
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let path = path.as_ref();
        let io = |message: String| EnvError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        Self::parse(&text).map_err(io)
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    /// Records sharing the most distinct terms with `query`; ties keep
    /// corpus order. Records sharing no term are left out.
    pub fn search(&self, query: &str, top_k: usize) -> Vec<&CorpusRecord> {
        let terms: HashSet<String> = tokens(query).collect();
        let mut scored: Vec<(usize, usize)> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let words: HashSet<String> = tokens(&r.title).chain(tokens(&r.text)).collect();
                (terms.intersection(&words).count(), i)
            })
            .filter(|(score, _)| *score > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(top_k).map(|(_, i)| &self.records[i]).collect()
    }
}

/// Term-overlap search over a fixed corpus.
pub fn search(name: &str, corpus: Corpus, top_k: usize) -> Tool {
    let schema = ToolSchema::with_string_args(name, "Search the document collection", &[("query", "Search terms")]);
    Tool::new(schema, move |args, _| {
        let query = string_arg(args, "query")?;
        let hits = corpus.search(query, top_k);
        let text = if hits.is_empty() {
            "No results.".to_string()
        } else {
            hits.iter()
                .map(|r| format!("[{}] {}: {}", r.id, r.title, r.text))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let result = serde_json::to_value(&hits).map_err(|e| e.to_string())?;
        Ok(ToolOutput::new(result, text))
    })
}

/// Answers questions to the user with scripted replies, in order. The next
/// reply is chosen by how many this tool has already given on the tape.
pub fn user_reply(name: &str, replies: Vec<String>) -> Tool {
    let schema = ToolSchema::with_string_args(name, "Ask the user a question", &[("question", "Question text")]);
    let tool_name = name.to_string();
    Tool::new(schema, move |args, ctx| {
        string_arg(args, "question")?;
        let given = ctx
            .tape
            .iter()
            .chain(ctx.earlier)
            .filter_map(ToolResult::from_step)
            .filter(|r| r.tool_name == tool_name)
            .count();
        let reply = replies
            .get(given)
            .ok_or_else(|| format!("no scripted reply left after {given}"))?;
        Ok(ToolOutput::new(Value::String(reply.clone()), reply.clone()))
    })
}

/// Case-insensitive key lookup in a fixed table.
pub fn lookup(name: &str, description: &str, argument: &str, table: BTreeMap<String, Value>) -> Tool {
    let schema = ToolSchema::with_string_args(name, description, &[(argument, "Lookup key")]);
    let argument = argument.to_string();
    Tool::new(schema, move |args, _| {
        let key = string_arg(args, &argument)?;
        let value = table
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key.trim()))
            .map(|(_, v)| v.clone())
            .ok_or_else(|| format!("no entry for `{key}`"))?;
        let text = match &value {
            Value::String(s) => s.clone(),
            other => to_canonical_string(other),
        };
        Ok(ToolOutput::new(value, text))
    })
}
