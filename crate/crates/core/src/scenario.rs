//! A financial analyst agent with a web-search helper, scripted against the
//! mock provider so sessions are reproducible offline.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use crate::agent::{AgentConfig, NodeConfig};
use crate::components::dialog;
use crate::environment::{CorpusRecord, EnvConfig, ToolConfig};
use crate::llm::{Chunking, LlmOutput, MockConfig, ProviderConfig, ScriptEntry, ToolCall, ToolSchema};
use crate::tape::builtin::{Call, Respond, SetNextNode, ToolCalls, ToolResult, UserMessage};
use crate::tape::{agent_metadata, Step, StepRegistry, Tape, TapeMetadata};

pub const ANALYST: &str = "analyst";
pub const SEARCH_AGENT: &str = "search_agent";
pub const QUESTION: &str = "Tell me about Vulcan in 3 sentences";

const SYSTEM: &str = "You will help the user to learn about financials of companies. For general user queries, \
include some info about stock price changes during the last year, as well as some general information on the \
company. Today is 2024-09-17.";
const PLAN_GUIDANCE: &str =
    "Write a natural language plan on how to use tools help the user. Output a list of numbered items, like 1., 2., 3., etc.";
const ACT_GUIDANCE: &str = "Follow the plan you created to earlier. When you are done, respond to the user.";
const SEARCH_SYSTEM: &str = "Use at most 5 tool calls to search the request info on on the web.";

fn call(id: &str, tool: &str, args: Value) -> ToolCall {
    ToolCall {
        call_id: id.into(),
        tool_name: tool.into(),
        arguments: args.to_string(),
    }
}

pub fn analyst_tools() -> Vec<ToolSchema> {
    vec![
        ToolSchema::with_string_args(
            "get_stock_ticker",
            "Get the stock ticker symbol of a company",
            &[("company_name", "Company name")],
        ),
        ToolSchema::with_string_args(
            "get_stock_data",
            "Get recent stock prices for a ticker",
            &[("symbol", "Ticker symbol")],
        ),
    ]
}

pub fn search_tools() -> Vec<ToolSchema> {
    vec![ToolSchema::with_string_args(
        "search",
        "Search the web",
        &[("query", "Search terms")],
    )]
}

/// LLM outputs for one full session, in call order.
pub fn analyst_script() -> Vec<LlmOutput> {
    vec![
        LlmOutput::text(
            "1. Look up the stock ticker of Vulcan.\n2. Ask the search agent for general information on the company.\n\
             3. Answer the user in 3 sentences.",
        ),
        LlmOutput::calls(vec![call("call_ticker", "get_stock_ticker", json!({"company_name": "Vulcan"}))]),
        LlmOutput::calls(vec![call(
            "call_search_agent",
            "call_search_agent",
            json!({"query": "Vulcan Materials company overview"}),
        )]),
        LlmOutput::calls(vec![call("call_search", "search", json!({"query": "Vulcan Materials company overview"}))]),
        LlmOutput::text(
            "Vulcan Materials is the largest US producer of construction aggregates such as crushed stone, sand and gravel.",
        ),
        LlmOutput::text(
            "Vulcan Materials (VMC) is the largest producer of construction aggregates in the United States. \
             It supplies crushed stone, sand and gravel for roads and buildings. Its stock rose over the last year.",
        ),
    ]
}

/// The analyst tree. `script` feeds the mock provider in the default slot.
pub fn analyst_config_with(script: Vec<LlmOutput>) -> AgentConfig {
    let tools = serde_json::to_value(analyst_tools()).expect("schemas serialize");
    let delegates = json!({
        "call_search_agent": {
            "agent": SEARCH_AGENT,
            "argument": "query",
            "description": "Use this tool to ask a fellow AI agent to search for information on the web."
        }
    });
    let search_agent = AgentConfig::new(
        SEARCH_AGENT,
        vec![NodeConfig::new(
            "main",
            dialog::HELPER,
            json!({"system_prompt": SEARCH_SYSTEM, "tools": search_tools()}),
        )],
    );
    let mock = MockConfig {
        script: script.into_iter().map(ScriptEntry::Output).collect(),
        chunking: Chunking::Words,
        ..MockConfig::default()
    };
    AgentConfig::new(
        ANALYST,
        vec![
            NodeConfig::new(
                "plan",
                dialog::PLAN,
                json!({"system_prompt": SYSTEM, "guidance": PLAN_GUIDANCE, "tools": tools, "delegates": delegates}),
            ),
            NodeConfig::new(
                "act",
                dialog::ACT,
                json!({"system_prompt": SYSTEM, "guidance": ACT_GUIDANCE, "tools": tools, "delegates": delegates}),
            ),
        ],
    )
    .with_llm("default", ProviderConfig::Mock(mock))
    .with_subagent(search_agent)
}

pub fn analyst_config() -> AgentConfig {
    analyst_config_with(analyst_script())
}

pub fn corpus() -> Vec<CorpusRecord> {
    let record = |id: &str, title: &str, text: &str| CorpusRecord {
        id: id.into(),
        title: title.into(),
        text: text.into(),
    };
    vec![
        record(
            "vmc-1",
            "Vulcan Materials Company",
            "Vulcan Materials is the largest US producer of construction aggregates such as crushed stone, sand and gravel.",
        ),
        record("vmc-2", "Vulcan stock", "VMC shares trade on the New York Stock Exchange."),
        record("vulcan-planet", "Vulcan (hypothetical planet)", "A planet once proposed to orbit inside Mercury."),
    ]
}

pub fn env_config() -> EnvConfig {
    let tickers = BTreeMap::from([("Vulcan".to_string(), Value::from("VMC"))]);
    let prices = BTreeMap::from([(
        "VMC".to_string(),
        json!({"2023-09-18": 202.1, "2024-03-18": 262.4, "2024-09-16": 243.9}),
    )]);
    EnvConfig {
        tools: vec![
            ToolConfig::Lookup {
                name: "get_stock_ticker".into(),
                description: "Get the stock ticker symbol of a company".into(),
                argument: "company_name".into(),
                table: tickers,
            },
            ToolConfig::Lookup {
                name: "get_stock_data".into(),
                description: "Get recent stock prices for a ticker".into(),
                argument: "symbol".into(),
                table: prices,
            },
            ToolConfig::Search {
                name: "search".into(),
                corpus: None,
                records: corpus(),
                top_k: 2,
            },
        ],
        ..EnvConfig::default()
    }
}

pub fn start_tape() -> Tape {
    Tape::from_steps(&StepRegistry::default(), vec![UserMessage::new(QUESTION).into_step()], "user")
        .expect("builtin steps validate")
}

/// A constructed 20-step session in which the analyst delegates at step 9
/// and the search agent responds at step 19 after working in steps 10-18.
pub fn delegation_tape() -> Tape {
    let analyst = |node: &str, prompt: &str| agent_metadata(ANALYST, node, Some(prompt.into()));
    let searcher = |prompt: &str| agent_metadata("analyst/search_agent", "main", Some(prompt.into()));
    let calls = |id: &str, tool: &str, args: Value| ToolCalls::new(vec![call(id, tool, args)]).into_step();
    let result = |id: &str, tool: &str, text: &str| {
        ToolResult {
            call_id: id.into(),
            tool_name: tool.into(),
            result: Value::from(text),
            text: text.into(),
        }
        .into_step()
    };
    let thought = |content: &str| {
        Step::raw(
            dialog::THOUGHT_KIND,
            crate::tape::StepCategory::Thought,
            json!({"content": content}).as_object().cloned().unwrap_or_default(),
        )
    };
    let steps = vec![
        UserMessage::new(QUESTION).into_step(),
        thought("1. ticker 2. prices 3. background 4. answer").with_metadata(analyst("plan", "p1")),
        SetNextNode::new(1).into_step().with_metadata(analyst("act", "p2")),
        calls("c1", "get_stock_ticker", json!({"company_name": "Vulcan"})).with_metadata(analyst("act", "p2")),
        result("c1", "get_stock_ticker", "VMC"),
        SetNextNode::new(1).into_step().with_metadata(analyst("act", "p3")),
        calls("c2", "get_stock_data", json!({"symbol": "VMC"})).with_metadata(analyst("act", "p3")),
        result("c2", "get_stock_data", "202.1 -> 243.9"),
        SetNextNode::new(1).into_step().with_metadata(analyst("act", "p4")),
        Call::new(SEARCH_AGENT, "Vulcan Materials company overview")
            .into_step()
            .with_metadata(analyst("act", "p4")),
        calls("c3", "search", json!({"query": "Vulcan Materials"})).with_metadata(searcher("p5")),
        SetNextNode::new(0).into_step().with_metadata(searcher("p5")),
        result("c3", "search", "[vmc-1] Vulcan Materials Company"),
        calls("c4", "search", json!({"query": "Vulcan Materials history"})).with_metadata(searcher("p6")),
        SetNextNode::new(0).into_step().with_metadata(searcher("p6")),
        result("c4", "search", "Founded in 1909."),
        calls("c5", "search", json!({"query": "Vulcan Materials revenue"})).with_metadata(searcher("p7")),
        SetNextNode::new(0).into_step().with_metadata(searcher("p7")),
        result("c5", "search", "Revenue of 7.8 billion dollars in 2023."),
        Respond::new("Vulcan Materials is the largest US aggregates producer, founded in 1909.")
            .into_step()
            .with_metadata(searcher("p8")),
    ];
    let mut registry = StepRegistry::default();
    registry.register(dialog::thought_kind()).expect("custom kind");
    Tape::from_steps(&registry, steps, "fixture").expect("fixture steps validate")
}

/// [`delegation_tape`] with fixed ids and timestamp, for byte-level fixtures.
pub fn golden_tape() -> Tape {
    let steps = delegation_tape()
        .steps()
        .iter()
        .enumerate()
        .map(|(i, step)| {
            let mut step = step.clone();
            step.metadata.id = format!("step-{i:02}");
            step
        })
        .collect();
    let metadata = TapeMetadata {
        id: "golden-delegation".into(),
        parent_id: None,
        author: "fixture".into(),
        n_added: 20,
        created_at: Some("2024-09-17T09:00:00.000000Z".into()),
    };
    Tape::from_parts(steps, metadata).expect("fixed ids are unique")
}

/// A two-step question answerer built from function templates: one call
/// writes a search query, a second answers from the search result.
pub mod qa {
    use serde_json::json;

    use crate::agent::{AgentConfig, NodeConfig, Template};
    use crate::components::function::{FieldDef, LlmFunctionTemplate, COMPONENT};
    use crate::llm::{LlmOutput, MockConfig, MockRule, ProviderConfig, ScriptEntry};
    use crate::optimize::MetricResult;
    use crate::tape::builtin::{AssistantMessage, UserMessage};
    use crate::tape::{StepRegistry, Tape};

    pub const AGENT: &str = "qa";
    pub const RIGHT: &str = "right";
    pub const WRONG: &str = "wrong";

    pub fn templates() -> Vec<LlmFunctionTemplate> {
        vec![
            LlmFunctionTemplate::new(
                "query",
                "Write a search query that finds the facts needed to answer the question.",
                vec![FieldDef::new("question", "", "")],
                vec![FieldDef::new("query", "", "")],
            ),
            LlmFunctionTemplate::new(
                "answer",
                "Answer the question using the context.",
                vec![FieldDef::new("question", "", ""), FieldDef::new("context", "", "")],
                vec![FieldDef::new("answer", "", "")],
            ),
        ]
    }

    pub fn config(llm: ProviderConfig) -> AgentConfig {
        let query = NodeConfig::new(
            "search",
            COMPONENT,
            json!({
                "template": "query",
                "inputs": {"question": {"kind": "user_message"}},
                "steps": [{"tool": "search", "arguments": {"query": "query"}}]
            }),
        );
        let answer = NodeConfig::new(
            "answer",
            COMPONENT,
            json!({
                "template": "answer",
                "inputs": {
                    "question": {"kind": "user_message"},
                    "context": {"kind": "tool_result", "field": "text"}
                },
                "steps": [{"kind": "assistant_message", "fields": {"content": "answer"}}]
            }),
        );
        let mut config = AgentConfig::new(AGENT, vec![query, answer]).with_llm("default", llm);
        for template in templates() {
            let name = template.name.clone();
            config = config.with_template(&name, Template::Function(template));
        }
        config
    }

    fn rule(contains: &str, output: &str) -> MockRule {
        MockRule {
            contains: contains.into(),
            output: ScriptEntry::Output(LlmOutput::text(output)),
        }
    }

    fn mock(rules: Vec<MockRule>) -> ProviderConfig {
        ProviderConfig::Mock(MockConfig {
            rules,
            ..MockConfig::default()
        })
    }

    /// Answers every question correctly.
    pub fn teacher() -> ProviderConfig {
        mock(vec![
            rule("\nAnswer:", &format!("Answer: {RIGHT}")),
            rule("Query:", "Query: Vulcan Materials"),
        ])
    }

    /// Answers correctly only when the answer prompt carries at least one
    /// demonstration, recognizable by a filled-in `Answer: ` line.
    pub fn rigged() -> ProviderConfig {
        mock(vec![
            rule("\nAnswer: ", &format!("Answer: {RIGHT}")),
            rule("\nAnswer:", &format!("Answer: {WRONG}")),
            rule("Query:", "Query: Vulcan Materials"),
        ])
    }

    pub fn task(question: &str) -> Tape {
        Tape::from_steps(&StepRegistry::default(), vec![UserMessage::new(question).into_step()], "user")
            .expect("builtin steps validate")
    }

    /// Success iff the final answer is the right one.
    pub fn metric(tape: &Tape) -> Result<MetricResult, String> {
        let answer = tape
            .last()
            .and_then(AssistantMessage::from_step)
            .ok_or("tape has no final answer")?;
        Ok(if answer.content == RIGHT {
            MetricResult::pass()
        } else {
            MetricResult::fail()
        })
    }
}
