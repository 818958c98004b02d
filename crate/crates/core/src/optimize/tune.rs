use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::{evaluate, filter_good_tapes, add_demos, OptimizeError, TapeMetric};
use crate::agent::AgentConfig;
use crate::llm::CallDb;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneConfig {
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    /// Good tapes sampled per trial; clamped to the pool size.
    #[serde(default = "default_tapes")]
    pub tapes_per_trial: usize,
    #[serde(default = "default_tapes")]
    pub max_demos_per_template: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_trials() -> usize {
    10
}

fn default_tapes() -> usize {
    4
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            n_trials: default_trials(),
            tapes_per_trial: default_tapes(),
            max_demos_per_template: default_tapes(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trial {
    /// Ids of the good tapes the candidate's demos were drawn from.
    pub tape_ids: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneResult {
    pub best_agent: AgentConfig,
    /// Index of the winning trial; `None` when no trial ran.
    pub best_trial: Option<usize>,
    pub trial_scores: Vec<f64>,
    pub trials: Vec<Trial>,
}

/// Mean over `tasks` of the metric total of the tape `runner` produces.
/// A task the runner fails on scores zero.
pub fn score_agent<T, R>(agent: &AgentConfig, tasks: &[T], metric: &dyn TapeMetric, runner: &R) -> f64
where
    R: Fn(&AgentConfig, &T) -> Result<Tape, String>,
{
    if tasks.is_empty() {
        return 0.0;
    }
    let total: f64 = tasks
        .iter()
        .map(|task| match runner(agent, task) {
            Ok(tape) => evaluate(metric, &tape).total(),
            Err(error) => {
                warn!(%error, "validation run failed");
                0.0
            }
        })
        .sum();
    total / tasks.len() as f64
}

/// Random search over demo sets: each trial adds demos drawn from a random
/// subset of the good training tapes and is scored on `val_tasks`.
///
/// All sampling is drawn from `config.seed` before any trial runs. The best
/// trial wins; ties go to the earlier trial.
pub fn tune_by_search<T, R>(
    agent: &AgentConfig,
    train_tapes: &[Tape],
    db: &CallDb,
    val_tasks: &[T],
    metric: &dyn TapeMetric,
    config: &TuneConfig,
    runner: R,
) -> Result<TuneResult, OptimizeError>
where
    R: Fn(&AgentConfig, &T) -> Result<Tape, String>,
{
    if config.n_trials == 0 {
        return Err(OptimizeError::Config("n_trials must be at least 1".into()));
    }
    let pool = filter_good_tapes(train_tapes, metric);
    if pool.is_empty() {
        warn!("no good tapes to draw demonstrations from");
        return Ok(TuneResult {
            best_agent: agent.clone(),
            best_trial: None,
            trial_scores: Vec::new(),
            trials: Vec::new(),
        });
    }
    let per_trial = config.tapes_per_trial.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let draws: Vec<(Vec<usize>, u64)> = (0..config.n_trials)
        .map(|_| {
            let mut picks = sample(&mut rng, pool.len(), per_trial).into_vec();
            picks.sort_unstable();
            (picks, rng.gen())
        })
        .collect();

    let mut best: Option<(usize, f64, AgentConfig)> = None;
    let mut trials = Vec::with_capacity(draws.len());
    for (index, (picks, demo_seed)) in draws.into_iter().enumerate() {
        let tapes: Vec<Tape> = picks.iter().map(|&i| pool[i].clone()).collect();
        let candidate = add_demos(agent, &tapes, db, config.max_demos_per_template, demo_seed);
        let score = score_agent(&candidate, val_tasks, metric, &runner);
        info!(trial = index, score, "trial scored");
        if best.as_ref().is_none_or(|(_, top, _)| score > *top) {
            best = Some((index, score, candidate));
        }
        trials.push(Trial {
            tape_ids: tapes.iter().map(|t| t.id().to_string()).collect(),
            score,
        });
    }
    let (index, _, best_agent) = best.expect("at least one trial ran");
    Ok(TuneResult {
        best_agent,
        best_trial: Some(index),
        trial_scores: trials.iter().map(|t| t.score).collect(),
        trials,
    })
}
