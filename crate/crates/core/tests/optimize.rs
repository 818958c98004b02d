use std::cell::Cell;
use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use serde_json::Value;
use tapes::agent::{make_training_text, AgentConfig, Template};
use tapes::components::standard_components;
use tapes::environment::ToolEnvironment;
use tapes::llm::{CallDb, ProviderConfig};
use tapes::optimize::{
    add_demos, export_training_data, extract_demos, filter_good_tapes, rejects_path, score_agent, tune_by_search,
    ExportRecord, OptimizeError, Rejection, TuneConfig,
};
use tapes::orchestrator::{main_loop_to_end, FinishReason, LoopConfig};
use tapes::scenario::{self, qa};
use tapes::tape::{Tape, TapeMetadata};

fn env() -> ToolEnvironment {
    scenario::env_config().build().unwrap()
}

/// Runs `config` on `task`, recording calls into `db` when given.
fn run(config: &AgentConfig, task: &Tape, env: &ToolEnvironment, db: Option<Arc<CallDb>>) -> Tape {
    let agent = standard_components().build(config, db).unwrap();
    let outcome = main_loop_to_end(&agent, task, env, LoopConfig::default());
    assert_eq!(outcome.reason, FinishReason::Stop, "{:?}", outcome.error);
    outcome.tape
}

fn questions(n: usize) -> Vec<Tape> {
    (0..n).map(|i| qa::task(&format!("Question number {i} about Vulcan?"))).collect()
}

/// Tapes recorded with `llm`, all calls in `db`.
fn record(llm: ProviderConfig, n: usize, db: &Arc<CallDb>) -> Vec<Tape> {
    let config = qa::config(llm);
    let env = env();
    questions(n).iter().map(|q| run(&config, q, &env, Some(db.clone()))).collect()
}

fn demos_of(config: &AgentConfig, template: &str) -> Vec<tapes::components::function::Demonstration> {
    config.templates[template].as_function().unwrap().demos.clone()
}

#[test]
fn extraction_recovers_each_call() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let tape = record(qa::teacher(), 1, &db).remove(0);
    let config = qa::config(qa::teacher());
    let extraction = extract_demos(&tape, &db, &config).unwrap();
    assert_eq!(extraction.skipped, 0);
    assert_eq!(extraction.demos.len(), 2);
    let total: usize = extraction.demos.values().map(Vec::len).sum();
    assert_eq!(total, db.count().unwrap());

    // Independent oracle: the bindings are the values visible on the tape.
    let question = tape[0].str_field("content").unwrap();
    let context = tape.iter().find(|s| s.kind == "tool_result").unwrap().str_field("text").unwrap();
    let arguments: Value = serde_json::from_str(
        tape.iter().find(|s| s.kind == "tool_calls").unwrap().field("tool_calls").unwrap()[0]["arguments"].as_str().unwrap(),
    )
    .unwrap();
    let query = &extraction.demos["query"][0];
    assert_eq!(query.bindings["question"], question);
    assert_eq!(query.bindings["query"], arguments["query"].as_str().unwrap());
    let answer = &extraction.demos["answer"][0];
    assert_eq!(answer.bindings["question"], question);
    assert_eq!(answer.bindings["context"], context);
    assert_eq!(answer.bindings["answer"], qa::RIGHT);
    for demo in extraction.demos.values().flatten() {
        assert_eq!(demo.source_tape_id, tape.id());
        assert!(db.contains(&demo.source_prompt_id).unwrap());
    }
}

#[test]
fn extraction_skips_other_components() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let config = scenario::analyst_config();
    let agent = standard_components().build(&config, Some(db.clone())).unwrap();
    let tape = main_loop_to_end(&agent, &scenario::start_tape(), &env(), LoopConfig::default()).tape;
    let extraction = extract_demos(&tape, &db, &config).unwrap();
    assert!(extraction.demos.is_empty());
    assert_eq!(extraction.skipped, db.count().unwrap());

    let plain = qa::task("no calls here");
    let empty = extract_demos(&plain, &db, &config).unwrap();
    assert!(empty.demos.is_empty());
    assert_eq!(empty.skipped, 0);
}

#[test]
fn extraction_requires_recorded_calls() {
    let recorded_in = Arc::new(CallDb::open_in_memory().unwrap());
    let tape = record(qa::teacher(), 1, &recorded_in).remove(0);
    let elsewhere = CallDb::open_in_memory().unwrap();
    let error = extract_demos(&tape, &elsewhere, &qa::config(qa::teacher())).unwrap_err();
    assert!(matches!(error, OptimizeError::UnresolvedPrompt { .. }), "{error}");
}

#[test]
fn add_demos_without_material_changes_nothing() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let tapes = record(qa::teacher(), 2, &db);
    let config = qa::config(qa::rigged());
    assert_eq!(add_demos(&config, &[], &db, 4, 7), config);
    assert_eq!(add_demos(&config, &tapes, &db, 0, 7), config);
}

#[test]
fn add_demos_from_one_tape() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let tape = record(qa::teacher(), 1, &db).remove(0);
    let config = qa::config(qa::rigged());
    let before = config.clone();
    let tuned = add_demos(&config, std::slice::from_ref(&tape), &db, 4, 7);
    assert_eq!(config, before);
    for template in ["query", "answer"] {
        let demos = demos_of(&tuned, template);
        assert_eq!(demos.len(), 1);
        assert_eq!(demos[0].source_tape_id, tape.id());
    }
    assert_eq!(tuned.nodes, config.nodes);
    assert_eq!(tuned.llms, config.llms);
}

#[test]
fn add_demos_samples_within_the_limit_deterministically() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let tapes = record(qa::teacher(), 6, &db);
    let config = qa::config(qa::rigged());
    let a = add_demos(&config, &tapes, &db, 3, 11);
    let b = add_demos(&config, &tapes, &db, 3, 11);
    assert_eq!(a, b);
    let demos = demos_of(&a, "answer");
    assert_eq!(demos.len(), 3);
    let distinct: HashSet<_> = demos.iter().map(|d| d.source_prompt_id.clone()).collect();
    assert_eq!(distinct.len(), 3);
}

#[test]
fn demos_trace_only_to_good_tapes() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let mut tapes = record(qa::teacher(), 3, &db);
    tapes.extend(record(qa::rigged(), 3, &db));
    let good = filter_good_tapes(&tapes, &qa::metric);
    assert_eq!(good.len(), 3);
    let good_ids: HashSet<&str> = good.iter().map(Tape::id).collect();
    let tuned = add_demos(&qa::config(qa::rigged()), &good, &db, 10, 3);
    let mut count = 0;
    tuned.walk(&mut |agent| {
        for template in agent.templates.values().filter_map(Template::as_function) {
            for demo in &template.demos {
                assert!(good_ids.contains(demo.source_tape_id.as_str()));
                count += 1;
            }
        }
    });
    assert_eq!(count, 6);
}

#[test]
fn tuning_runs_ten_trials_of_four_tapes_by_default() {
    let started = Instant::now();
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let train = record(qa::teacher(), 6, &db);
    let val = questions(3);
    let env = env();
    let runs = Cell::new(0);
    let runner = |config: &AgentConfig, task: &Tape| {
        runs.set(runs.get() + 1);
        Ok(run(config, task, &env, None))
    };
    let config = qa::config(qa::rigged());
    let result = tune_by_search(&config, &train, &db, &val, &qa::metric, &TuneConfig::default(), runner).unwrap();
    assert_eq!(result.trial_scores.len(), 10);
    assert_eq!(result.trials.len(), 10);
    assert!(result.trials.iter().all(|t| t.tape_ids.len() == 4));
    assert_eq!(runs.get(), 10 * val.len());
    // every trial gets demos, so all score perfectly and the first wins
    assert!(result.trial_scores.iter().all(|&s| s == 1.0));
    assert_eq!(result.best_trial, Some(0));

    let baseline = score_agent(&config, &val, &qa::metric, &|c: &AgentConfig, t: &Tape| Ok(run(c, t, &env, None)));
    let tuned = score_agent(&result.best_agent, &val, &qa::metric, &|c: &AgentConfig, t: &Tape| {
        Ok(run(c, t, &env, None))
    });
    assert_eq!(baseline, 0.0);
    assert!(tuned > baseline);
    assert!(started.elapsed().as_secs() < 30);
}

#[test]
fn tuning_is_seeded() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let train = record(qa::teacher(), 6, &db);
    let val = questions(1);
    let env = env();
    let runner = |config: &AgentConfig, task: &Tape| Ok(run(config, task, &env, None));
    let config = qa::config(qa::rigged());
    let tune = |seed| {
        let settings = TuneConfig {
            n_trials: 3,
            tapes_per_trial: 2,
            max_demos_per_template: 1,
            seed,
        };
        tune_by_search(&config, &train, &db, &val, &qa::metric, &settings, runner).unwrap()
    };
    let (a, b) = (tune(5), tune(5));
    assert_eq!(a, b);
    let draws: HashSet<Vec<String>> = a.trials.iter().map(|t| t.tape_ids.clone()).collect();
    assert!(draws.len() > 1, "different trials draw different tapes");
}

#[test]
fn tuning_edge_cases() {
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let env = env();
    let runner = |config: &AgentConfig, task: &Tape| Ok(run(config, task, &env, None));
    let config = qa::config(qa::rigged());
    let val = questions(1);

    let bad = record(qa::rigged(), 2, &db);
    let empty = tune_by_search(&config, &bad, &db, &val, &qa::metric, &TuneConfig::default(), runner).unwrap();
    assert_eq!(empty.best_agent, config);
    assert!(empty.trial_scores.is_empty());

    let zero = TuneConfig {
        n_trials: 0,
        ..TuneConfig::default()
    };
    assert!(matches!(
        tune_by_search(&config, &bad, &db, &val, &qa::metric, &zero, runner),
        Err(OptimizeError::Config(_))
    ));

    let good = record(qa::teacher(), 2, &db);
    let single = TuneConfig {
        n_trials: 1,
        ..TuneConfig::default()
    };
    let one = tune_by_search(&config, &good, &db, &val, &qa::metric, &single, runner).unwrap();
    assert_eq!(one.best_trial, Some(0));
    assert_eq!(one.trials[0].tape_ids.len(), 2, "tapes per trial is clamped to the pool");
    let good_ids: HashSet<&str> = good.iter().map(Tape::id).collect();
    for template in ["query", "answer"] {
        let demos = demos_of(&one.best_agent, template);
        let sources: HashSet<&str> = demos.iter().map(|d| d.source_tape_id.as_str()).collect();
        assert_eq!(sources, good_ids);
    }
}

#[test]
fn export_writes_one_record_per_call() {
    let dir = tempfile::tempdir().unwrap();
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let agent = standard_components().build(&qa::config(qa::teacher()), None).unwrap();

    let empty_path = dir.path().join("empty.jsonl");
    let summary = export_training_data(&agent, &[], &db, &empty_path).unwrap();
    assert_eq!(summary.written, 0);
    assert_eq!(std::fs::read_to_string(&empty_path).unwrap(), "");

    let tape = record(qa::teacher(), 1, &db).remove(0);
    let path = dir.path().join("one.jsonl");
    let summary = export_training_data(&agent, std::slice::from_ref(&tape), &db, &path).unwrap();
    let expected = make_training_text(&agent, &tape, Some(&db)).unwrap().len();
    assert_eq!(expected, 2);
    assert_eq!(summary.written, expected);
    let records: Vec<ExportRecord> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 2);
    for record in &records {
        assert_eq!(record.source_tape_id, tape.id());
        let call = db.get(&record.source_prompt_id).unwrap();
        assert!(record.prompt_text.ends_with(&call.prompt.messages[1].content));
        assert_eq!(record.completion_text, call.output.content_str());
    }
}

#[test]
fn export_sets_aside_corrupted_tapes() {
    let dir = tempfile::tempdir().unwrap();
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let agent = standard_components().build(&qa::config(qa::teacher()), None).unwrap();
    let mut tapes = record(qa::teacher(), 2, &db);
    let mut steps = tapes[1].steps().to_vec();
    let last = steps.last_mut().unwrap();
    last.payload.insert("content".into(), Value::from("tampered"));
    let corrupted = Tape::from_parts(steps, TapeMetadata::fresh("test")).unwrap();
    tapes[1] = corrupted.clone();

    let path = dir.path().join("mixed.jsonl");
    let summary = export_training_data(&agent, &tapes, &db, &path).unwrap();
    assert_eq!(summary.written, 2);
    assert_eq!(summary.rejects_path, rejects_path(&path));
    let rejected: Vec<Rejection> =
        serde_json::from_str(&std::fs::read_to_string(rejects_path(&path)).unwrap()).unwrap();
    assert_eq!(rejected.len(), 1);
    assert_eq!(rejected[0].tape_id, corrupted.id());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().all(|l| l.contains(tapes[0].id())));
}

#[test]
fn tuned_agent_persists_as_a_config_document() {
    let dir = tempfile::tempdir().unwrap();
    let db = Arc::new(CallDb::open_in_memory().unwrap());
    let tapes = record(qa::teacher(), 2, &db);
    let tuned = add_demos(&qa::config(qa::rigged()), &tapes, &db, 2, 1);
    let path = dir.path().join("tuned.yaml");
    tuned.save(&path).unwrap();
    assert_eq!(AgentConfig::load(&path).unwrap(), tuned);
}
