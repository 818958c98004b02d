use std::collections::HashSet;
use std::ops::Index;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::error::TapeError;
use super::registry::StepRegistry;
use super::step::{new_id, Step, StepMetadata};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeMetadata {
    pub id: String,
    /// Set when this tape is a revision (fork) of another tape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default)]
    pub author: String,
    #[serde(default)]
    pub n_added: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

impl TapeMetadata {
    pub fn fresh(author: &str) -> Self {
        Self {
            id: new_id(),
            parent_id: None,
            author: author.into(),
            n_added: 0,
            created_at: Some(now_iso()),
        }
    }
}

pub(crate) fn now_iso() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

/// Immutable ordered sequence of steps plus lineage metadata.
///
/// Every mutation-like operation returns a new tape; the steps themselves are
/// shared between a tape and the tapes derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    steps: Arc<Vec<Step>>,
    metadata: TapeMetadata,
}

impl Tape {
    pub fn empty(author: &str) -> Self {
        Self {
            steps: Arc::new(Vec::new()),
            metadata: TapeMetadata::fresh(author),
        }
    }

    /// Builds a root tape from `steps`, validating each one.
    pub fn from_steps(registry: &StepRegistry, steps: Vec<Step>, author: &str) -> Result<Self, TapeError> {
        let tape = Self::empty(author).append(registry, steps, author)?;
        Ok(tape)
    }

    /// Assembles a tape from parts that were already validated (for example
    /// by the document decoder). Only step id uniqueness is checked.
    pub fn from_parts(steps: Vec<Step>, metadata: TapeMetadata) -> Result<Self, TapeError> {
        check_unique_ids(&steps)?;
        if metadata.parent_id.as_deref() == Some(metadata.id.as_str()) {
            return Err(TapeError::Malformed("parent_id equals id".into()));
        }
        if metadata.n_added > steps.len() {
            return Err(TapeError::Malformed(format!(
                "n_added {} exceeds step count {}",
                metadata.n_added,
                steps.len()
            )));
        }
        Ok(Self {
            steps: Arc::new(steps),
            metadata,
        })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn metadata(&self) -> &TapeMetadata {
        &self.metadata
    }

    pub fn id(&self) -> &str {
        &self.metadata.id
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<&Step> {
        self.steps.last()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Step> {
        self.steps.iter()
    }

    /// The steps appended by the latest producer.
    pub fn added_steps(&self) -> &[Step] {
        &self.steps[self.steps.len() - self.metadata.n_added..]
    }

    /// Returns a new tape with `steps` appended. Steps with an empty id get a
    /// fresh one; every step must validate against `registry`.
    pub fn append(&self, registry: &StepRegistry, steps: Vec<Step>, author: &str) -> Result<Tape, TapeError> {
        let mut seen: HashSet<&str> = self.steps.iter().map(Step::id).collect();
        let mut added = Vec::with_capacity(steps.len());
        for mut step in steps {
            registry.validate(&step)?;
            if step.metadata.id.is_empty() {
                step.metadata.id = new_id();
            }
            added.push(step);
        }
        for step in &added {
            if !seen.insert(step.id()) {
                return Err(TapeError::DuplicateStepId(step.id().to_string()));
            }
        }
        let n_added = added.len();
        let mut all = Vec::with_capacity(self.steps.len() + n_added);
        all.extend(self.steps.iter().cloned());
        all.extend(added);
        Ok(Tape {
            steps: Arc::new(all),
            metadata: TapeMetadata {
                n_added,
                ..TapeMetadata::fresh(author)
            },
        })
    }

    /// Revision of this tape: steps before `edit_index` are kept, the
    /// replacement takes `edit_index`, later steps are dropped.
    pub fn fork(
        &self,
        registry: &StepRegistry,
        edit_index: usize,
        replacement: Step,
        author: &str,
    ) -> Result<Tape, TapeError> {
        if edit_index >= self.len() {
            return Err(TapeError::IndexOutOfRange {
                index: edit_index,
                len: self.len(),
            });
        }
        registry.validate(&replacement)?;
        let mut replacement = replacement;
        if replacement.metadata.id.is_empty()
            || self.steps[..edit_index].iter().any(|s| s.id() == replacement.id())
        {
            replacement.metadata.id = new_id();
        }
        let mut steps: Vec<Step> = self.steps[..edit_index].to_vec();
        steps.push(replacement);
        Ok(Tape {
            steps: Arc::new(steps),
            metadata: TapeMetadata {
                parent_id: Some(self.metadata.id.clone()),
                n_added: 1,
                ..TapeMetadata::fresh(author)
            },
        })
    }

    /// The first `len` steps as a new tape whose parent is this one.
    pub fn truncate(&self, len: usize) -> Tape {
        let len = len.min(self.len());
        Tape {
            steps: Arc::new(self.steps[..len].to_vec()),
            metadata: TapeMetadata {
                parent_id: Some(self.metadata.id.clone()),
                ..TapeMetadata::fresh(&self.metadata.author)
            },
        }
    }

    /// Content equality under the default volatile-field mask.
    pub fn content_eq(&self, other: &Tape) -> bool {
        self.len() == other.len()
            && self.steps.iter().zip(other.steps.iter()).all(|(a, b)| a.content_eq(b))
    }

    pub fn with_metadata(mut self, metadata: TapeMetadata) -> Result<Tape, TapeError> {
        if metadata.n_added > self.len() {
            return Err(TapeError::Malformed("n_added exceeds step count".into()));
        }
        self.metadata = metadata;
        Ok(self)
    }
}

impl Index<usize> for Tape {
    type Output = Step;

    fn index(&self, index: usize) -> &Step {
        &self.steps[index]
    }
}

impl<'a> IntoIterator for &'a Tape {
    type Item = &'a Step;
    type IntoIter = std::slice::Iter<'a, Step>;

    fn into_iter(self) -> Self::IntoIter {
        self.steps.iter()
    }
}

fn check_unique_ids(steps: &[Step]) -> Result<(), TapeError> {
    let mut seen = HashSet::with_capacity(steps.len());
    for step in steps {
        if step.metadata.id.is_empty() {
            return Err(TapeError::Malformed("step with empty id".into()));
        }
        if !seen.insert(step.id()) {
            return Err(TapeError::DuplicateStepId(step.id().to_string()));
        }
    }
    Ok(())
}

/// Metadata for a step generated by `agent`'s `node`.
pub fn agent_metadata(agent: &str, node: &str, prompt_id: Option<String>) -> StepMetadata {
    StepMetadata {
        agent: agent.into(),
        node: node.into(),
        prompt_id,
        ..StepMetadata::fresh()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn thought(registry: &StepRegistry, text: &str) -> Step {
        registry.step("respond", json!({ "content": text })).unwrap()
    }

    fn user(registry: &StepRegistry, text: &str) -> Step {
        registry.step("user_message", json!({ "content": text })).unwrap()
    }

    #[test]
    fn empty_append_keeps_content() {
        let registry = StepRegistry::default();
        let tape = Tape::from_steps(&registry, vec![user(&registry, "hi")], "user").unwrap();
        let appended = tape.append(&registry, vec![], "agent").unwrap();
        assert!(appended.content_eq(&tape));
        assert_eq!(appended.metadata().n_added, 0);
        assert_ne!(appended.id(), tape.id());
        assert_eq!(appended.metadata().parent_id, None);
    }

    #[test]
    fn append_counts_and_leaves_input_untouched() {
        let registry = StepRegistry::default();
        let tape = Tape::from_steps(
            &registry,
            vec![user(&registry, "a"), user(&registry, "b")],
            "user",
        )
        .unwrap();
        let snapshot = tape.clone();
        let next = tape
            .append(
                &registry,
                (0..3).map(|i| thought(&registry, &i.to_string())).collect(),
                "agent",
            )
            .unwrap();
        assert_eq!(next.len(), 5);
        assert_eq!(next.metadata().n_added, 3);
        assert_eq!(next.metadata().author, "agent");
        assert_eq!(next.added_steps().len(), 3);
        assert_eq!(tape, snapshot);
    }

    #[test]
    fn duplicate_step_id_rejected() {
        let registry = StepRegistry::default();
        let first = user(&registry, "a");
        let tape = Tape::from_steps(&registry, vec![first.clone()], "user").unwrap();
        let err = tape.append(&registry, vec![first], "user").unwrap_err();
        assert!(matches!(err, TapeError::DuplicateStepId(_)));
    }

    #[test]
    fn fork_semantics() {
        let registry = StepRegistry::default();
        let steps: Vec<Step> = (0..10).map(|i| user(&registry, &i.to_string())).collect();
        let tape = Tape::from_steps(&registry, steps, "user").unwrap();

        let at_zero = tape.fork(&registry, 0, user(&registry, "new"), "editor").unwrap();
        assert_eq!(at_zero.len(), 1);
        assert_eq!(at_zero.metadata().parent_id.as_deref(), Some(tape.id()));
        assert_eq!(at_zero.metadata().author, "editor");

        let at_four = tape.fork(&registry, 4, user(&registry, "new"), "editor").unwrap();
        assert_eq!(at_four.len(), 5);
        assert!(at_four.steps()[..4]
            .iter()
            .zip(tape.steps())
            .all(|(a, b)| a == b));

        let err = tape.fork(&registry, 10, user(&registry, "new"), "editor").unwrap_err();
        assert!(matches!(err, TapeError::IndexOutOfRange { index: 10, len: 10 }));
    }

    #[test]
    fn fork_rejects_invalid_replacement() {
        let registry = StepRegistry::default();
        let tape = Tape::from_steps(&registry, vec![user(&registry, "a")], "user").unwrap();
        let mut bad = user(&registry, "b");
        bad.payload.remove("content");
        assert!(tape.fork(&registry, 0, bad, "editor").is_err());
    }

    #[test]
    fn fork_lineage_terminates() {
        let registry = StepRegistry::default();
        let mut tapes = vec![Tape::from_steps(&registry, vec![user(&registry, "root")], "user").unwrap()];
        for i in 0..5 {
            let last = tapes.last().unwrap();
            let grown = last.append(&registry, vec![user(&registry, &format!("{i}"))], "user").unwrap();
            let forked = grown.fork(&registry, grown.len() - 1, user(&registry, "edit"), "editor").unwrap();
            tapes.push(grown);
            tapes.push(forked);
        }
        let by_id: std::collections::HashMap<&str, &Tape> = tapes.iter().map(|t| (t.id(), t)).collect();
        for tape in &tapes {
            let mut hops = 0;
            let mut cursor = tape;
            while let Some(parent) = cursor.metadata().parent_id.as_deref() {
                assert_ne!(parent, cursor.id());
                cursor = by_id[parent];
                hops += 1;
                assert!(hops <= tapes.len());
            }
        }
    }
}
