use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// The role a step plays in the agent/environment conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepCategory {
    Thought,
    Action,
    Observation,
    Control,
}

impl StepCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            StepCategory::Thought => "thought",
            StepCategory::Action => "action",
            StepCategory::Observation => "observation",
            StepCategory::Control => "control",
        }
    }
}

impl fmt::Display for StepCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Attribution attached to every step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetadata {
    pub id: String,
    /// Hierarchical agent path, segments joined by `/`. Empty for
    /// environment-authored observations.
    #[serde(default)]
    pub agent: String,
    #[serde(default)]
    pub node: String,
    /// Links the step to the LLM call that produced it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub other: BTreeMap<String, Value>,
}

impl StepMetadata {
    pub fn fresh() -> Self {
        Self {
            id: new_id(),
            ..Self::default()
        }
    }
}

/// One tape entry: a kind-discriminated payload plus metadata.
///
/// Steps are normally built through [`StepRegistry::step`](super::StepRegistry::step)
/// so the payload is validated against the registered schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub kind: String,
    pub category: StepCategory,
    pub payload: Map<String, Value>,
    pub metadata: StepMetadata,
}

impl Step {
    /// Builds a step without validation. Callers that bypass the registry
    /// get checked again on [`Tape::append`](super::Tape::append).
    pub fn raw(kind: impl Into<String>, category: StepCategory, payload: Map<String, Value>) -> Self {
        Self {
            kind: kind.into(),
            category,
            payload,
            metadata: StepMetadata::fresh(),
        }
    }

    pub fn id(&self) -> &str {
        &self.metadata.id
    }

    pub fn is_action(&self) -> bool {
        self.category == StepCategory::Action
    }

    pub fn is_observation(&self) -> bool {
        self.category == StepCategory::Observation
    }

    pub fn field(&self, name: &str) -> Option<&Value> {
        self.payload.get(name)
    }

    pub fn str_field(&self, name: &str) -> Option<&str> {
        self.payload.get(name).and_then(Value::as_str)
    }

    /// Equality on kind, category and payload; metadata is ignored.
    pub fn content_eq(&self, other: &Step) -> bool {
        self.kind == other.kind && self.category == other.category && self.payload == other.payload
    }

    pub fn with_metadata(mut self, metadata: StepMetadata) -> Self {
        self.metadata = metadata;
        self
    }

    /// The flat document form: `kind`, `category`, payload fields and a
    /// nested `metadata` object.
    pub fn to_document(&self) -> Value {
        let mut doc = self.payload.clone();
        doc.insert("kind".into(), Value::String(self.kind.clone()));
        doc.insert("category".into(), Value::String(self.category.as_str().into()));
        doc.insert(
            "metadata".into(),
            serde_json::to_value(&self.metadata).expect("metadata is always serializable"),
        );
        Value::Object(doc)
    }
}

pub fn new_id() -> String {
    uuid::Uuid::new_v4().to_string()
}
