use std::collections::{BTreeMap, HashSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::{debug, warn};

use super::OptimizeError;
use crate::agent::{AgentConfig, Template};
use crate::components::function::{self, Demonstration, FunctionNodeParams, LlmFunctionTemplate};
use crate::llm::CallDb;
use crate::tape::Tape;

/// Demonstrations recovered from one tape, keyed by template name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub demos: BTreeMap<String, Vec<Demonstration>>,
    /// LLM calls that did not come from a function template.
    pub skipped: usize,
}

/// Function template `name` visible from the agent at `path`.
fn template_for<'a>(root: &'a AgentConfig, path: &str, name: &str) -> Option<&'a LlmFunctionTemplate> {
    let mut path = path;
    loop {
        if let Some(t) = root.find(path).and_then(|a| a.templates.get(name)) {
            return t.as_function();
        }
        path = path.rsplit_once('/')?.0;
    }
}

/// The function template behind a node, with its name, if the node is a
/// function node.
fn function_template<'a>(root: &'a AgentConfig, path: &str, node: &str) -> Option<(String, &'a LlmFunctionTemplate)> {
    let node = root.find(path)?.nodes.iter().find(|n| n.name == node)?;
    if node.component != function::COMPONENT {
        return None;
    }
    let params: FunctionNodeParams = serde_json::from_value(node.params.clone()).ok()?;
    let template = template_for(root, path, &params.template)?;
    Some((params.template, template))
}

/// Rebuilds the input and output bindings of every function-template call
/// on `tape` from the recorded prompts and outputs.
pub fn extract_demos(tape: &Tape, db: &CallDb, agent: &AgentConfig) -> Result<Extraction, OptimizeError> {
    let mut extraction = Extraction::default();
    let mut seen = HashSet::new();
    for step in tape.iter() {
        let Some(prompt_id) = step.metadata.prompt_id.as_deref() else {
            continue;
        };
        if step.metadata.agent.is_empty() || !seen.insert(prompt_id) {
            continue;
        }
        let record = db.find(prompt_id)?.ok_or_else(|| OptimizeError::UnresolvedPrompt {
            tape_id: tape.id().to_string(),
            prompt_id: prompt_id.to_string(),
        })?;
        let Some((name, template)) = function_template(agent, &step.metadata.agent, &step.metadata.node) else {
            extraction.skipped += 1;
            continue;
        };
        let parsed = template
            .parse_inputs(&record.prompt)
            .and_then(|inputs| Ok((inputs, template.parse(record.output.content_str())?)));
        match parsed {
            Ok((mut bindings, outputs)) => {
                bindings.extend(outputs);
                extraction.demos.entry(name).or_default().push(Demonstration {
                    bindings,
                    source_tape_id: tape.id().to_string(),
                    source_prompt_id: prompt_id.to_string(),
                });
            }
            Err(error) => {
                debug!(prompt_id, %error, "call does not parse against its template");
                extraction.skipped += 1;
            }
        }
    }
    Ok(extraction)
}

/// Returns a copy of `agent` whose function templates carry up to
/// `max_demos` demonstrations drawn without replacement from `good_tapes`.
///
/// Templates with no extracted demonstrations are left as they are; tapes
/// whose calls cannot be resolved are skipped.
pub fn add_demos(agent: &AgentConfig, good_tapes: &[Tape], db: &CallDb, max_demos: usize, seed: u64) -> AgentConfig {
    let mut tuned = agent.clone();
    if max_demos == 0 || good_tapes.is_empty() {
        return tuned;
    }
    let mut pool: BTreeMap<String, Vec<Demonstration>> = BTreeMap::new();
    for tape in good_tapes {
        match extract_demos(tape, db, agent) {
            Ok(extraction) => {
                for (name, demos) in extraction.demos {
                    pool.entry(name).or_default().extend(demos);
                }
            }
            Err(error) => warn!(tape = tape.id(), %error, "skipping tape"),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeMap<String, Vec<Demonstration>> = pool
        .into_iter()
        .map(|(name, demos)| {
            let mut picks = sample(&mut rng, demos.len(), max_demos.min(demos.len())).into_vec();
            picks.sort_unstable();
            (name, picks.into_iter().map(|i| demos[i].clone()).collect())
        })
        .collect();
    tuned.walk_mut(&mut |config| {
        for (name, template) in config.templates.iter_mut() {
            if let (Template::Function(f), Some(demos)) = (template, chosen.get(name)) {
                f.demos = demos.clone();
            }
        }
    });
    tuned
}
