//! Command-line entry points. Each command returns the process exit code.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use tapes::agent::AgentConfig;
use tapes::components::standard_components;
use tapes::environment::{EnvConfig, Environment};
use tapes::llm::{default_db_path, CallDb};
use tapes::optimize::{
    export_training_data, has_repeated_actions, tune_by_search, MetricResult, TuneConfig,
};
use tapes::orchestrator::{
    first_agent_step, main_loop_to_end, replay, EnvMode, FinishReason, LoopConfig, MainLoopEvent, ReplayError,
    ReplayOptions, DEFAULT_MAX_ROUNDS,
};
use tapes::tape::builtin::{AssistantMessage, Respond, UserMessage};
use tapes::tape::codec::serialize;
use tapes::tape::{diff_with, DiffOptions, Step, StepCategory, StepRegistry, Tape};

use crate::runs::RunManager;
use crate::store::{read_tape, read_tape_dir, TapeStore, DEFAULT_STORE_DIR};
use crate::{run_session, ServiceError};

#[derive(Debug, Parser)]
#[command(name = "tapes", version, about = "Run, replay and inspect agent tapes")]
pub struct Cli {
    /// Tape store directory.
    #[arg(long, global = true, env = "TAPE_STORE_DIR")]
    pub store: Option<PathBuf>,
    /// LLM call database.
    #[arg(long, global = true, env = "TAPEAGENTS_DB_PATH")]
    pub db: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an agent on a tape until it finishes.
    Run(RunArgs),
    /// Continue a stored tape with the agent that produced it.
    Resume(ResumeArgs),
    /// Re-run a stored tape from recorded LLM calls and compare.
    Replay(ReplayArgs),
    /// Compare two tapes given as store ids or files.
    Diff(DiffArgs),
    /// Print the store index.
    Browse {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Print a tape in canonical form.
    Show { tape: String },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Write training records for the LLM calls behind a directory of tapes.
    ExportTraining {
        #[arg(long)]
        tapes: PathBuf,
        #[arg(long)]
        agent: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search for demonstrations that improve an agent on validation tapes.
    TuneDemos(TuneArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub agent: PathBuf,
    /// Starting tape file.
    #[arg(long)]
    pub tape: PathBuf,
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Also write the final tape here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    pub max_rounds: usize,
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    #[arg(long)]
    pub tape: String,
    /// Use this agent instead of the recorded one.
    #[arg(long)]
    pub agent: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    pub max_rounds: usize,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub tape: String,
    /// Also compare which agent and node produced each step.
    #[arg(long)]
    pub strict: bool,
    /// Serve tool calls from the live environment instead of the recording.
    #[arg(long)]
    pub live: bool,
    #[arg(long)]
    pub agent: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    pub a: String,
    pub b: String,
    /// Also compare attribution, ids and timestamps.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub agent: PathBuf,
    /// Directory of recorded training tapes.
    #[arg(long)]
    pub train: PathBuf,
    /// Directory of reference tapes used as validation tasks.
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub env: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 4)]
    pub tapes_per_trial: usize,
    #[arg(long, default_value_t = 4)]
    pub max_demos: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

struct Context {
    store_dir: PathBuf,
    db_path: PathBuf,
}

impl Context {
    fn store(&self) -> Result<TapeStore, ServiceError> {
        Ok(TapeStore::open(&self.store_dir)?)
    }

    fn db(&self) -> Result<Arc<CallDb>, ServiceError> {
        Ok(Arc::new(CallDb::open(&self.db_path)?))
    }
}

/// Runs the parsed command and returns the exit code.
pub fn execute(cli: Cli) -> i32 {
    let ctx = Context {
        store_dir: cli.store.unwrap_or_else(|| PathBuf::from(DEFAULT_STORE_DIR)),
        db_path: cli.db.unwrap_or_else(default_db_path),
    };
    let result = match cli.command {
        Command::Run(args) => run(&ctx, args),
        Command::Resume(args) => resume(&ctx, args),
        Command::Replay(args) => replay_tape(&ctx, args),
        Command::Diff(args) => diff_tapes(&ctx, args),
        Command::Browse { dir } => browse(dir.as_deref().unwrap_or(&ctx.store_dir)),
        Command::Show { tape } => show(&ctx, &tape),
        Command::Serve { port, host } => serve(&ctx, &host, port),
        Command::ExportTraining { tapes, agent, out } => export(&ctx, &tapes, &agent, &out),
        Command::TuneDemos(args) => tune(&ctx, args),
    };
    match result {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error}");
            1
        }
    }
}

fn load_env(path: Option<&Path>) -> Result<EnvConfig, ServiceError> {
    Ok(match path {
        Some(path) => EnvConfig::load(path)?,
        None => EnvConfig::default(),
    })
}

/// A store id, or a tape file when `arg` names an existing file.
fn resolve_tape(store: &TapeStore, arg: &str) -> Result<Tape, ServiceError> {
    let path = Path::new(arg);
    if path.is_file() {
        Ok(read_tape(&StepRegistry::default(), path)?)
    } else {
        Ok(store.load(arg)?)
    }
}

fn summary(step: &Step) -> String {
    let text = match step.str_field("content") {
        Some(content) => content.to_string(),
        None => Value::Object(step.payload.clone()).to_string(),
    };
    let line = text.replace('\n', " ");
    match line.char_indices().nth(100) {
        Some((at, _)) => format!("{}...", &line[..at]),
        None => line,
    }
}

fn print_step(index: usize, step: &Step) {
    let who = match (step.metadata.agent.as_str(), step.metadata.node.as_str()) {
        ("", _) => "-".to_string(),
        (agent, "") => agent.to_string(),
        (agent, node) => format!("{agent}.{node}"),
    };
    println!("{index:>4}  {:<11} {:<18} {:<28} {}", step.category.to_string(), step.kind, who, summary(step));
}

/// Prints steps as they land on the tape.
fn step_printer(mut shown: usize) -> impl FnMut(&MainLoopEvent) {
    move |event| match event {
        MainLoopEvent::Agent(tapes::agent::AgentEvent::Step(step)) => {
            print_step(shown, step);
            shown += 1;
        }
        MainLoopEvent::EnvTape(tape) | MainLoopEvent::Finished { tape, .. } => {
            for (i, step) in tape.steps().iter().enumerate().skip(shown) {
                print_step(i, step);
            }
            shown = shown.max(tape.len());
        }
        MainLoopEvent::Agent(_) => {}
    }
}

fn finish_line(result: &crate::SessionResult) -> i32 {
    println!(
        "finished: reason={} rounds={} steps={} tape={}",
        result.reason.as_str(),
        result.rounds,
        result.tape.len(),
        result.tape.id()
    );
    if let Some(error) = &result.error {
        eprintln!("error: {error}");
    }
    i32::from(result.reason == FinishReason::Error)
}

fn run(ctx: &Context, args: RunArgs) -> Result<i32, ServiceError> {
    let store = ctx.store()?;
    let agent = AgentConfig::load(&args.agent)?;
    let env = load_env(args.env.as_deref())?;
    let input = read_tape(&StepRegistry::default(), &args.tape)?;
    for (i, step) in input.steps().iter().enumerate() {
        print_step(i, step);
    }
    let config = LoopConfig::default().with_max_rounds(args.max_rounds);
    let result = run_session(&store, ctx.db()?, &agent, &env, &input, config, &mut step_printer(input.len()))?;
    if let Some(out) = &args.out {
        std::fs::write(out, serialize(&result.tape)).map_err(|e| ServiceError::Invalid(format!("{}: {e}", out.display())))?;
    }
    Ok(finish_line(&result))
}

fn resume(ctx: &Context, args: ResumeArgs) -> Result<i32, ServiceError> {
    let store = ctx.store()?;
    let tape = store.load(&args.tape)?;
    let manifest = store.manifest(&args.tape).ok();
    let agent = match (&args.agent, &manifest) {
        (Some(path), _) => AgentConfig::load(path)?,
        (None, Some(m)) => m.agent.clone(),
        (None, None) => return Err(ServiceError::Invalid(format!("tape `{}` has no recorded agent; pass --agent", args.tape))),
    };
    let env = match (&args.env, &manifest) {
        (Some(path), _) => EnvConfig::load(path)?,
        (None, Some(m)) => m.env.clone(),
        (None, None) => EnvConfig::default(),
    };
    let config = LoopConfig::default().with_max_rounds(args.max_rounds);
    let result = run_session(&store, ctx.db()?, &agent, &env, &tape, config, &mut step_printer(tape.len()))?;
    Ok(finish_line(&result))
}

fn replay_tape(ctx: &Context, args: ReplayArgs) -> Result<i32, ServiceError> {
    let store = ctx.store()?;
    let tape = store.load(&args.tape)?;
    let manifest = store.manifest(&args.tape).ok();
    let agent = match (&args.agent, &manifest) {
        (Some(path), _) => AgentConfig::load(path)?,
        (None, Some(m)) => m.agent.clone(),
        (None, None) => return Err(ServiceError::Invalid(format!("tape `{}` has no recorded agent; pass --agent", args.tape))),
    };
    let env = match (&args.env, &manifest) {
        (Some(path), _) => EnvConfig::load(path)?,
        (None, Some(m)) => m.env.clone(),
        (None, None) => EnvConfig::default(),
    };
    let built = standard_components().build(&agent, None)?;
    let live = env.build()?;
    let options = ReplayOptions {
        env_mode: if args.live { EnvMode::Live } else { EnvMode::Replay },
        diff: DiffOptions {
            attribution: args.strict,
            volatile: false,
        },
        loop_config: manifest.map(|m| m.loop_config).unwrap_or_default(),
        ..ReplayOptions::default()
    };
    let db = ctx.db()?;
    match replay(&built, &tape, Some(&live as &dyn Environment), &db, options) {
        Ok(report) if report.matched => {
            println!(
                "replay matched: {} steps, {} LLM calls compared",
                tape.len(),
                report.calls_compared
            );
            Ok(0)
        }
        Ok(report) => {
            let index = report.first_divergence.unwrap_or(0);
            println!("replay diverged at step {index}");
            print!("{}", report.diff.render());
            Ok(1)
        }
        Err(ReplayError::Stopped { index, source }) => {
            println!("replay diverged at step {index}: {source}");
            Ok(1)
        }
        Err(error) => Err(error.into()),
    }
}

fn diff_tapes(ctx: &Context, args: DiffArgs) -> Result<i32, ServiceError> {
    let store = ctx.store()?;
    let a = resolve_tape(&store, &args.a)?;
    let b = resolve_tape(&store, &args.b)?;
    let options = if args.strict { DiffOptions::strict() } else { DiffOptions::default() };
    let report = diff_with(&a, &b, options);
    if report.is_empty() {
        println!("tapes are equal");
        return Ok(0);
    }
    print!("{}", report.render());
    Ok(1)
}

fn browse(dir: &Path) -> Result<i32, ServiceError> {
    let store = TapeStore::open(dir)?;
    let entries = store.list()?;
    println!("{:<36}  {:<36}  {:<12}  {:>5}  created", "id", "parent", "author", "steps");
    for e in &entries {
        println!(
            "{:<36}  {:<36}  {:<12}  {:>5}  {}",
            e.id,
            e.parent_id.as_deref().unwrap_or("-"),
            e.author,
            e.steps,
            e.created_at.as_deref().unwrap_or("-")
        );
    }
    println!("{} tapes", entries.len());
    Ok(0)
}

fn show(ctx: &Context, arg: &str) -> Result<i32, ServiceError> {
    let tape = resolve_tape(&ctx.store()?, arg)?;
    let bytes = serialize(&tape);
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(0)
}

fn serve(ctx: &Context, host: &str, port: u16) -> Result<i32, ServiceError> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| ServiceError::Invalid(format!("bad address: {e}")))?;
    let runs = Arc::new(RunManager::new(Arc::new(ctx.store()?), ctx.db()?));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| ServiceError::Invalid(e.to_string()))?;
    runtime
        .block_on(crate::api::serve(runs, addr))
        .map_err(|e| ServiceError::Invalid(format!("server: {e}")))?;
    Ok(0)
}

fn export(ctx: &Context, tapes_dir: &Path, agent: &Path, out: &Path) -> Result<i32, ServiceError> {
    let tapes = read_tape_dir(&StepRegistry::default(), tapes_dir)?;
    let agent = standard_components().build(&AgentConfig::load(agent)?, None)?;
    let summary = export_training_data(&agent, &tapes, &*ctx.db()?, out)?;
    println!("wrote {} records to {}", summary.written, out.display());
    if !summary.rejected.is_empty() {
        println!(
            "rejected {} tapes, listed in {}",
            summary.rejected.len(),
            summary.rejects_path.display()
        );
    }
    Ok(0)
}

/// Final answer of a tape: its last assistant message or respond.
fn final_answer(tape: &Tape) -> Option<String> {
    tape.iter().rev().find_map(|s| {
        AssistantMessage::from_step(s)
            .map(|m| m.content)
            .or_else(|| Respond::from_step(s).map(|r| r.content))
    })
}

fn opening_question(tape: &Tape) -> Option<String> {
    tape.iter().find_map(UserMessage::from_step).map(|m| m.content)
}

fn tune(ctx: &Context, args: TuneArgs) -> Result<i32, ServiceError> {
    let registry = StepRegistry::default();
    let agent = AgentConfig::load(&args.agent)?;
    let env = load_env(args.env.as_deref())?.build()?;
    let train = read_tape_dir(&registry, &args.train)?;
    let val = read_tape_dir(&registry, &args.val)?;
    let references: std::collections::HashMap<String, String> = val
        .iter()
        .filter_map(|t| Some((opening_question(t)?, final_answer(t)?)))
        .collect();
    // With a reference for the question the answer must match it; otherwise
    // the tape must end in an answer without failures or repeated actions.
    let metric = |tape: &Tape| -> Result<MetricResult, String> {
        let answer = final_answer(tape).ok_or("no final answer")?;
        let good = match opening_question(tape).and_then(|q| references.get(&q)) {
            Some(expected) => *expected == answer,
            None => {
                !has_repeated_actions(tape)
                    && !tape.iter().any(|s| s.kind == "action_failure" || s.kind == "parse_failure")
                    && tape.last().is_some_and(|s| s.category == StepCategory::Action)
            }
        };
        Ok(if good { MetricResult::pass() } else { MetricResult::fail() })
    };
    let runner = |config: &AgentConfig, reference: &Tape| -> Result<Tape, String> {
        let built = standard_components().build(config, None).map_err(|e| e.to_string())?;
        let task = reference.truncate(first_agent_step(reference));
        let outcome = main_loop_to_end(&built, &task, &env, LoopConfig::default());
        match outcome.error {
            Some(error) => Err(error.to_string()),
            None => Ok(outcome.tape),
        }
    };
    let config = TuneConfig {
        n_trials: args.trials,
        tapes_per_trial: args.tapes_per_trial,
        max_demos_per_template: args.max_demos,
        seed: args.seed,
    };
    let result = tune_by_search(&agent, &train, &*ctx.db()?, &val, &metric, &config, runner)?;
    for (i, trial) in result.trials.iter().enumerate() {
        println!("trial {i:>2}  score {:.3}  tapes {}", trial.score, trial.tape_ids.join(","));
    }
    match result.best_trial {
        Some(best) => println!("best trial {best} with score {:.3}", result.trial_scores[best]),
        None => println!("no good training tapes; agent left unchanged"),
    }
    result.best_agent.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}
