use std::collections::HashSet;
use std::sync::Arc;

use serde_json::json;
use tapes::agent::{make_training_text, run, run_to_end, AgentConfig, AgentError, AgentEvent, NodeConfig, RunConfig};
use tapes::components::function::{FieldDef, LlmFunctionTemplate};
use tapes::components::standard_components;
use tapes::agent::Template;
use tapes::llm::{CallDb, MockConfig, MockRule, ProviderConfig, ScriptEntry};
use tapes::tape::builtin::{ActionFailure, AssistantMessage, ParseFailure, UserMessage};
use tapes::tape::{FieldSpec, FieldType, StepCategory, StepKind, StepRegistry, Tape};

fn mock(script: &[&str]) -> ProviderConfig {
    ProviderConfig::Mock(MockConfig {
        script: script.iter().map(|s| ScriptEntry::Text(s.to_string())).collect(),
        ..MockConfig::default()
    })
}

fn looping_mock(output: &str) -> ProviderConfig {
    ProviderConfig::Mock(MockConfig {
        rules: vec![MockRule {
            contains: String::new(),
            output: ScriptEntry::Text(output.into()),
        }],
        ..MockConfig::default()
    })
}

fn note_kind() -> StepKind {
    StepKind::new("note", StepCategory::Thought, vec![FieldSpec::required("content", FieldType::String)])
}

fn mono_node(name: &str, allowed: &[&str], hint: Option<usize>) -> NodeConfig {
    let mut params = json!({"system_template": "You are terse.", "guidance": "Next step?", "allowed_steps": allowed});
    if let Some(hint) = hint {
        params["next_node_hint"] = hint.into();
    }
    NodeConfig::new(name, "mono", params)
}

fn question() -> Tape {
    Tape::from_steps(&StepRegistry::default(), vec![UserMessage::new("What is the capital of France?").into_step()], "user")
        .unwrap()
}

/// Every generated step names its agent and node; prompt ids resolve and
/// every recorded call is referenced.
fn assert_linked(tape: &Tape, from: usize, db: &CallDb) {
    let mut referenced = HashSet::new();
    for step in &tape.steps()[from..] {
        assert!(!step.metadata.agent.is_empty(), "{step:?}");
        if step.kind != ActionFailure::KIND {
            assert!(!step.metadata.node.is_empty(), "{step:?}");
        }
        if let Some(id) = &step.metadata.prompt_id {
            assert!(db.contains(id).unwrap(), "unrecorded prompt {id}");
            referenced.insert(id.clone());
        }
    }
    for record in db.list().unwrap() {
        assert!(referenced.contains(&record.prompt_id), "orphan call {}", record.prompt_id);
    }
}

#[test]
fn single_action() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let config = AgentConfig::new("solo", vec![mono_node("main", &["assistant_message"], None)])
        .with_llm("default", mock(&[r#"{"kind":"assistant_message","content":"Paris"}"#]));
    let agent = standard_components().build(&config, Some(db.clone())).unwrap();
    let input = question();
    let out = run_to_end(&agent, &input, RunConfig::default()).unwrap();
    assert_eq!(out.len(), input.len() + 1);
    let step = out.last().unwrap();
    assert_eq!(AssistantMessage::from_step(step).unwrap().content, "Paris");
    assert_eq!((step.metadata.agent.as_str(), step.metadata.node.as_str()), ("solo", "main"));
    assert_linked(&out, input.len(), &db);
}

#[test]
fn thought_with_jump_then_action() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let config = AgentConfig::new("solo", vec![mono_node("main", &["note", "set_next_node", "assistant_message"], None)])
        .with_step_kind(note_kind())
        .with_llm(
            "default",
            mock(&[
                r#"[{"kind":"note","content":"think"},{"kind":"set_next_node","next_node":0}]"#,
                r#"{"kind":"assistant_message","content":"Paris"}"#,
            ]),
        );
    let agent = standard_components().build(&config, Some(db.clone())).unwrap();
    let input = question();
    let out = run_to_end(&agent, &input, RunConfig::default()).unwrap();
    let kinds: Vec<&str> = out.steps()[1..].iter().map(|s| s.kind.as_str()).collect();
    assert_eq!(kinds, ["note", "set_next_node", "assistant_message"]);
    let prompts: HashSet<_> = out.steps()[1..].iter().map(|s| s.metadata.prompt_id.clone().unwrap()).collect();
    assert_eq!(prompts.len(), 2);
    assert_eq!(db.count().unwrap(), 2);
    assert_linked(&out, 1, &db);

    let samples = make_training_text(&agent, &out, Some(&db)).unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0].source_step_indices, [1, 2]);
    assert_eq!(samples[1].source_step_indices, [3]);
}

#[test]
fn events_stream_in_order() {
    let config = AgentConfig::new("solo", vec![mono_node("main", &["assistant_message"], None)])
        .with_llm("default", mock(&[r#"{"kind":"assistant_message","content":"the capital is Paris"}"#]));
    let agent = standard_components().build(&config, None).unwrap();
    let events: Vec<AgentEvent> = run(&agent, &question(), RunConfig::default()).collect();
    let partials: Vec<&str> = events
        .iter()
        .filter_map(|e| match e {
            AgentEvent::PartialStep { text, .. } => Some(text.as_str()),
            _ => None,
        })
        .collect();
    assert!(partials.len() > 1);
    assert!(partials.windows(2).all(|w| w[1].starts_with(w[0])));
    assert!(matches!(events[events.len() - 2], AgentEvent::Step(_)));
    let finals = events.iter().filter(|e| matches!(e, AgentEvent::FinalTape(_))).count();
    assert_eq!(finals, 1);
    assert!(matches!(events.last(), Some(AgentEvent::FinalTape(t)) if t.len() == 2));
}

#[test]
fn runaway_fails_loudly() {
    let config = AgentConfig::new("solo", vec![mono_node("main", &["note"], Some(0))])
        .with_step_kind(note_kind())
        .with_llm("default", looping_mock(r#"{"kind":"note","content":"hmm"}"#));
    let agent = standard_components().build(&config, None).unwrap();
    let failure = run_to_end(&agent, &question(), RunConfig { max_iterations: 5 }).unwrap_err();
    assert!(matches!(failure.error, AgentError::Runaway { limit: 5 }));
    // input, then 5 executions of [set_next_node, note], then the failure
    assert_eq!(failure.tape.len(), 1 + 10 + 1);
    assert!(ActionFailure::from_step(failure.tape.last().unwrap()).is_some());
}

#[test]
fn sequential_nodes_run_out() {
    let config = AgentConfig::new("solo", vec![mono_node("first", &["note"], None), mono_node("second", &["note"], None)])
        .with_step_kind(note_kind())
        .with_llm("default", looping_mock(r#"{"kind":"note","content":"hmm"}"#));
    let agent = standard_components().build(&config, None).unwrap();
    let failure = run_to_end(&agent, &question(), RunConfig::default()).unwrap_err();
    assert!(matches!(failure.error, AgentError::NodeExhausted { .. }), "{}", failure.error);
    let nodes: Vec<&str> = failure.tape.steps()[1..3].iter().map(|s| s.metadata.node.as_str()).collect();
    assert_eq!(nodes, ["first", "second"]);
}

#[test]
fn malformed_output_becomes_parse_failure() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let config = AgentConfig::new("solo", vec![mono_node("main", &["assistant_message"], None)])
        .with_llm("default", mock(&["I think Paris"]));
    let agent = standard_components().build(&config, Some(db.clone())).unwrap();
    let out = run_to_end(&agent, &question(), RunConfig::default()).unwrap();
    assert_eq!(out.len(), 2);
    let failure = ParseFailure::from_step(&out[1]).unwrap();
    assert_eq!(failure.raw, "I think Paris");
    assert!(out[1].metadata.prompt_id.is_some());
    assert_linked(&out, 1, &db);
}

#[test]
fn unregistered_allowed_kind_is_a_config_error() {
    let config = AgentConfig::new("solo", vec![mono_node("main", &["teleport"], None)]).with_llm("default", mock(&[]));
    assert!(matches!(standard_components().build(&config, None), Err(AgentError::Config(_))));
}

#[test]
fn exhausted_provider_fails_the_run() {
    let config = AgentConfig::new("solo", vec![mono_node("main", &["assistant_message"], None)]).with_llm("default", mock(&[]));
    let agent = standard_components().build(&config, None).unwrap();
    let failure = run_to_end(&agent, &question(), RunConfig::default()).unwrap_err();
    assert!(matches!(failure.error, AgentError::Llm(_)), "{}", failure.error);
    let step = failure.tape.last().unwrap();
    assert_eq!(step.kind, ActionFailure::KIND);
    assert_eq!(step.metadata.node, "main");
}

#[test]
fn function_node_answers_and_reconstructs() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let template = LlmFunctionTemplate::new(
        "qa",
        "Answer the question with a short factoid.",
        vec![FieldDef::new("question", "", "")],
        vec![FieldDef::new("answer", "", "")],
    );
    let node = NodeConfig::new(
        "answer",
        "llm_function",
        json!({
            "template": "qa",
            "inputs": {"question": {"kind": "user_message"}},
            "steps": [{"kind": "assistant_message", "fields": {"content": "answer"}}]
        }),
    );
    let config = AgentConfig::new("qa_agent", vec![node])
        .with_template("qa", Template::Function(template))
        .with_llm("default", mock(&["Answer: Paris"]));
    let agent = standard_components().build(&config, Some(db.clone())).unwrap();
    let out = run_to_end(&agent, &question(), RunConfig::default()).unwrap();
    assert_eq!(AssistantMessage::from_step(&out[1]).unwrap().content, "Paris");
    let record = db.get(out[1].metadata.prompt_id.as_deref().unwrap()).unwrap();
    assert_eq!(record.prompt.messages[1].content, "Question: What is the capital of France?\nAnswer:");
    let samples = make_training_text(&agent, &out, Some(&db)).unwrap();
    assert_eq!(samples.len(), 1);
    assert_eq!(samples[0].output.content_str(), "Answer: Paris");
}

#[test]
fn team_alternates_manager_and_workers() {
    let worker = |name: &str| {
        AgentConfig::new(name, vec![NodeConfig::new("speak", "team", json!({"role": "worker", "system_prompt": name}))])
    };
    let manager = AgentConfig::new(
        "manager",
        vec![NodeConfig::new(
            "choose",
            "team",
            json!({"role": "manager", "team": ["engineer", "critic"], "max_turns": 3}),
        )],
    );
    let config = AgentConfig::new("user_proxy", vec![NodeConfig::new("relay", "team", json!({"role": "initiator"}))])
        .with_subagent(manager)
        .with_subagent(worker("engineer"))
        .with_subagent(worker("critic"))
        .with_llm(
            "default",
            mock(&["engineer", "draft v1", "CRITIC please", "looks wrong", "nobody", "draft v2"]),
        );
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let agent = standard_components().build(&config, Some(db.clone())).unwrap();
    let input = Tape::from_steps(&StepRegistry::default(), vec![UserMessage::new("Plot prices").into_step()], "user").unwrap();
    let out = run_to_end(&agent, &input, RunConfig::default()).unwrap();

    let calls: Vec<String> = out
        .iter()
        .filter(|s| s.kind == "call")
        .map(|s| s.str_field("agent_name").unwrap().to_string())
        .collect();
    // the third pick falls back to the member after the critic
    assert_eq!(calls, ["manager", "engineer", "critic", "engineer"]);
    assert_eq!(AssistantMessage::from_step(out.last().unwrap()).unwrap().content, "draft v2");

    let worker_responds: Vec<usize> = out
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == "respond" && s.metadata.agent != "user_proxy/manager")
        .map(|(i, _)| i)
        .collect();
    for pair in worker_responds.windows(2) {
        let manager_calls = out.steps()[pair[0]..pair[1]]
            .iter()
            .filter(|s| s.kind == "call" && s.metadata.agent == "user_proxy/manager")
            .count();
        assert_eq!(manager_calls, 1);
    }
    assert_linked(&out, 1, &db);
    assert_eq!(make_training_text(&agent, &out, Some(&db)).unwrap().len(), db.count().unwrap());
}
