//! Generators and reference interpreters shared by the property tests and
//! the acceptance run.
#![allow(dead_code)]

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tapes::agent::{Agent, AgentConfig, NodeConfig};
use tapes::components::standard_components;
use tapes::llm::{MockConfig, ProviderConfig};
use tapes::tape::builtin::{
    ActionFailure, AssistantMessage, Call, ParseFailure, Respond, SetNextNode, ToolCall, ToolCalls, ToolResult,
    UserMessage,
};
use tapes::tape::{Step, Tape, TapeMetadata};

fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z0-9 ]{0,16}",
        any::<String>().prop_map(|s| s.chars().take(24).collect()),
        Just("line one\nline \"two\"\t\\".to_string()),
    ]
}

fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        text().prop_map(Value::from),
    ];
    leaf.prop_recursive(3, 16, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::btree_map("[a-z_]{1,6}", inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

fn tool_call() -> impl Strategy<Value = ToolCall> {
    (text(), "[a-z_]{1,10}", json_value()).prop_map(|(id, name, args)| ToolCall {
        call_id: id,
        tool_name: name,
        arguments: args.to_string(),
    })
}

fn payload_step() -> impl Strategy<Value = Step> {
    prop_oneof![
        (text(), text()).prop_map(|(a, c)| Call::new(a, c).into_step()),
        text().prop_map(|c| Respond::new(c).into_step()),
        (0usize..1000).prop_map(|n| SetNextNode::new(n).into_step()),
        text().prop_map(|c| UserMessage::new(c).into_step()),
        text().prop_map(|c| AssistantMessage::new(c).into_step()),
        prop::collection::vec(tool_call(), 1..4).prop_map(|c| ToolCalls::new(c).into_step()),
        (text(), text(), json_value(), text()).prop_map(|(call_id, tool_name, result, text)| ToolResult {
            call_id,
            tool_name,
            result,
            text,
        }
        .into_step()),
        (prop::option::of(text()), text()).prop_map(|(id, r)| ActionFailure::new(id, r).into_step()),
        (text(), text()).prop_map(|(raw, e)| ParseFailure::new(raw, e).into_step()),
    ]
}

fn step() -> impl Strategy<Value = Step> {
    (
        payload_step(),
        "[a-z]{0,8}(/[a-z]{1,8}){0,2}",
        "[a-z_]{0,8}",
        prop::option::of("[0-9a-f]{8}"),
        prop::collection::btree_map("[a-z_]{1,8}", json_value(), 0..3),
    )
        .prop_map(|(mut step, agent, node, prompt_id, other)| {
            step.metadata.agent = agent;
            step.metadata.node = node;
            step.metadata.prompt_id = prompt_id;
            step.metadata.other = other;
            step
        })
}

pub fn tape() -> impl Strategy<Value = Tape> {
    (
        prop::collection::vec(step(), 0..12),
        "[a-z0-9-]{1,12}",
        prop::option::of("[a-z0-9-]{1,12}"),
        text(),
        prop::option::of(text()),
    )
        .prop_map(|(steps, id, parent, author, created_at)| {
            let steps: Vec<Step> = steps
                .into_iter()
                .enumerate()
                .map(|(i, mut s)| {
                    s.metadata.id = format!("{id}-{i}");
                    s
                })
                .collect();
            let n_added = steps.len() / 2;
            let metadata = TapeMetadata {
                parent_id: parent.map(|p| format!("parent-{p}")),
                id,
                author,
                n_added,
                created_at,
            };
            Tape::from_parts(steps, metadata).unwrap()
        })
}

/// Changes one payload value of `step`.
pub fn mutate(step: &mut Step) {
    let key = step.payload.keys().next().cloned().unwrap_or_else(|| "extra".into());
    let old = step.payload.get(&key).cloned().unwrap_or(Value::Null);
    let new = match old {
        Value::String(s) => Value::String(format!("{s}!")),
        Value::Number(n) => Value::from(n.as_u64().unwrap_or(0) + 1),
        Value::Array(mut items) => {
            items.push(json!({"call_id": "x", "tool_name": "x", "arguments": "{}"}));
            Value::Array(items)
        }
        other => json!([other]),
    };
    step.payload.insert(key, new);
}

/// Agent tree used by the delegation oracle, as (path, children).
pub const TREE: &[(&str, &[&str])] = &[
    ("root", &["alpha", "beta"]),
    ("root/alpha", &["gamma", "delta"]),
    ("root/beta", &["epsilon"]),
    ("root/alpha/gamma", &[]),
    ("root/alpha/delta", &["zeta"]),
    ("root/beta/epsilon", &[]),
    ("root/alpha/delta/zeta", &[]),
];

pub fn children(path: &str) -> &'static [&'static str] {
    TREE.iter().find(|(p, _)| *p == path).map(|(_, c)| *c).unwrap()
}

pub fn oracle_agent() -> Agent {
    fn config(path: &str) -> AgentConfig {
        let name = path.rsplit('/').next().unwrap();
        let node = NodeConfig::new("main", "mono", json!({"allowed_steps": ["assistant_message"]}));
        let mut config = AgentConfig::new(name, vec![node]);
        for child in children(path) {
            config = config.with_subagent(config_for(&format!("{path}/{child}")));
        }
        config
    }
    fn config_for(path: &str) -> AgentConfig {
        config(path)
    }
    let root = config("root").with_llm("default", ProviderConfig::Mock(MockConfig::default()));
    standard_components().build(&root, None).unwrap()
}

/// A random well-nested sequence. Callees are children or siblings of the
/// active agent.
pub fn sequence(rng: &mut ChaCha8Rng, len: usize) -> Vec<Step> {
    let mut stack = vec!["root".to_string()];
    let mut steps = Vec::with_capacity(len);
    for _ in 0..len {
        let top = stack.last().unwrap().clone();
        let mut callees: Vec<String> = children(&top).iter().map(|c| format!("{top}/{c}")).collect();
        if let Some((parent, me)) = top.rsplit_once('/') {
            callees.extend(children(parent).iter().filter(|c| *c != &me).map(|c| format!("{parent}/{c}")));
        }
        let roll = rng.gen_range(0..10);
        let step = if roll < 4 && !callees.is_empty() {
            let callee = callees[rng.gen_range(0..callees.len())].clone();
            let name = callee.rsplit('/').next().unwrap().to_string();
            stack.push(callee);
            Call::new(name, "task").into_step()
        } else if roll < 7 && stack.len() > 1 {
            stack.pop();
            Respond::new("done").into_step()
        } else {
            AssistantMessage::new(format!("work by {top}")).into_step()
        };
        steps.push(step);
    }
    steps
}

/// Push/pop interpretation of `steps`, written independently of the runtime.
pub fn reference_active(steps: &[Step]) -> String {
    let mut stack = vec!["root".to_string()];
    for step in steps {
        match step.kind.as_str() {
            "call" => {
                let top = stack.last().unwrap().clone();
                let name = step.str_field("agent_name").unwrap();
                let path = if children(&top).contains(&name) {
                    format!("{top}/{name}")
                } else {
                    let parent = top.rsplit_once('/').unwrap().0;
                    assert!(children(parent).contains(&name));
                    format!("{parent}/{name}")
                };
                stack.push(path);
            }
            "respond" => {
                stack.pop();
            }
            _ => {}
        }
    }
    stack.pop().unwrap()
}
