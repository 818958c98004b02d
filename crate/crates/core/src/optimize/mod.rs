//! Agent improvement from recorded tapes: filtering, demonstrations,
//! demo search and training-data export.

mod demos;
mod export;
mod tune;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::agent::AgentError;
use crate::llm::LlmError;
use crate::tape::builtin::ToolCalls;
use crate::tape::Tape;

pub use demos::{add_demos, extract_demos, Extraction};
pub use export::{completion_text, export_training_data, prompt_text, rejects_path, ExportRecord, ExportSummary, Rejection, REJECTS_SUFFIX};
pub use tune::{score_agent, tune_by_search, Trial, TuneConfig, TuneResult};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("prompt `{prompt_id}` on tape `{tape_id}` has no recorded call")]
    UnresolvedPrompt { tape_id: String, prompt_id: String },
    #[error("tuning config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Verdict of a metric on one tape.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub success: bool,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

impl MetricResult {
    pub fn pass() -> Self {
        Self {
            success: true,
            scores: BTreeMap::new(),
        }
    }

    pub fn fail() -> Self {
        Self::default()
    }

    pub fn with_score(mut self, name: &str, value: f64) -> Self {
        self.scores.insert(name.into(), value);
        self
    }

    /// Sum of the named scores, or 1/0 by success when there are none.
    pub fn total(&self) -> f64 {
        if self.scores.is_empty() {
            f64::from(u8::from(self.success))
        } else {
            self.scores.values().sum()
        }
    }
}

/// Deterministic judgement of a finished tape.
pub trait TapeMetric {
    fn evaluate(&self, tape: &Tape) -> Result<MetricResult, String>;
}

impl<F> TapeMetric for F
where
    F: Fn(&Tape) -> Result<MetricResult, String>,
{
    fn evaluate(&self, tape: &Tape) -> Result<MetricResult, String> {
        self(tape)
    }
}

/// Evaluates `metric`, turning errors and panics into a failed verdict.
pub fn evaluate(metric: &dyn TapeMetric, tape: &Tape) -> MetricResult {
    match catch_unwind(AssertUnwindSafe(|| metric.evaluate(tape))) {
        Ok(Ok(result)) => result,
        Ok(Err(message)) => {
            warn!(tape = tape.id(), %message, "metric failed");
            MetricResult::fail()
        }
        Err(_) => {
            warn!(tape = tape.id(), "metric panicked");
            MetricResult::fail()
        }
    }
}

/// The tapes the metric marks successful, in input order.
pub fn filter_good_tapes(tapes: &[Tape], metric: &dyn TapeMetric) -> Vec<Tape> {
    tapes.iter().filter(|t| evaluate(metric, t).success).cloned().collect()
}

/// True when two actions on the tape carry the same request. Tool calls
/// compare by tool name and arguments.
pub fn has_repeated_actions(tape: &Tape) -> bool {
    let mut seen = std::collections::HashSet::new();
    for step in tape.iter().filter(|s| s.is_action()) {
        let keys: Vec<String> = match ToolCalls::from_step(step) {
            Some(calls) => calls
                .tool_calls
                .iter()
                .map(|c| format!("tool_call\u{0}{}\u{0}{}", c.tool_name, c.arguments))
                .collect(),
            None => vec![format!("{}\u{0}{}", step.kind, serde_json::Value::Object(step.payload.clone()))],
        };
        for key in keys {
            if !seen.insert(key) {
                return true;
            }
        }
    }
    false
}

/// Wraps `metric` so tapes with repeated actions fail.
pub fn without_repeated_actions<M: TapeMetric>(metric: M) -> impl TapeMetric {
    move |tape: &Tape| {
        if has_repeated_actions(tape) {
            Ok(MetricResult::fail())
        } else {
            metric.evaluate(tape)
        }
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;
    use crate::tape::builtin::{AssistantMessage, ToolCall, UserMessage};
    use crate::tape::StepRegistry;

    fn tape(steps: Vec<crate::tape::Step>) -> Tape {
        Tape::from_steps(&StepRegistry::default(), steps, "test").unwrap()
    }

    fn search(id: &str, query: &str) -> crate::tape::Step {
        ToolCalls::new(vec![ToolCall {
            call_id: id.into(),
            tool_name: "search".into(),
            arguments: json!({ "query": query }).to_string(),
        }])
        .into_step()
    }

    fn always(result: MetricResult) -> impl TapeMetric {
        move |_: &Tape| Ok(result.clone())
    }

    #[test]
    fn empty_input_filters_to_nothing() {
        assert!(filter_good_tapes(&[], &always(MetricResult::pass())).is_empty());
    }

    #[test]
    fn always_true_keeps_everything_in_order() {
        let tapes: Vec<Tape> = (0..5)
            .map(|i| tape(vec![UserMessage::new(format!("q{i}")).into_step()]))
            .collect();
        let good = filter_good_tapes(&tapes, &always(MetricResult::pass()));
        let ids: Vec<&str> = good.iter().map(Tape::id).collect();
        assert_eq!(ids, tapes.iter().map(Tape::id).collect::<Vec<_>>());
    }

    #[test]
    fn failing_evaluators_reject_without_crashing() {
        let tapes = vec![tape(vec![UserMessage::new("q").into_step()])];
        let erring = |_: &Tape| -> Result<MetricResult, String> { Err("no answer".into()) };
        let panicking = |_: &Tape| -> Result<MetricResult, String> { panic!("boom") };
        assert!(filter_good_tapes(&tapes, &erring).is_empty());
        assert!(filter_good_tapes(&tapes, &panicking).is_empty());
    }

    #[test]
    fn repeated_queries_are_excluded() {
        let repeated = tape(vec![
            UserMessage::new("q").into_step(),
            search("a", "vulcan"),
            search("b", "vulcan"),
            AssistantMessage::new("done").into_step(),
        ]);
        let distinct = tape(vec![
            UserMessage::new("q").into_step(),
            search("a", "vulcan"),
            search("b", "vulcan history"),
            AssistantMessage::new("done").into_step(),
        ]);
        assert!(has_repeated_actions(&repeated));
        assert!(!has_repeated_actions(&distinct));
        let metric = without_repeated_actions(always(MetricResult::pass()));
        let good = filter_good_tapes(&[repeated, distinct.clone()], &metric);
        assert_eq!(good.len(), 1);
        assert_eq!(good[0].id(), distinct.id());
    }

    #[test]
    fn totals_sum_named_scores() {
        assert_eq!(MetricResult::pass().total(), 1.0);
        assert_eq!(MetricResult::fail().total(), 0.0);
        let both = MetricResult::pass().with_score("retrieval", 0.5).with_score("answer", 1.0);
        assert_eq!(both.total(), 1.5);
    }
}
