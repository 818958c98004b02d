use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::error::AgentError;
use crate::components::function::LlmFunctionTemplate;
use crate::llm::ProviderConfig;
use crate::tape::codec::to_canonical_pretty;
use crate::tape::StepKind;

/// Prompt template: free text or a function-style template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Template {
    Text(String),
    Function(LlmFunctionTemplate),
}

impl Template {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Template::Text(text) => Some(text),
            Template::Function(_) => None,
        }
    }

    pub fn as_function(&self) -> Option<&LlmFunctionTemplate> {
        match self {
            Template::Function(f) => Some(f),
            Template::Text(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub name: String,
    /// Name of the component that implements the node.
    pub component: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
}

impl NodeConfig {
    pub fn new(name: &str, component: &str, params: Value) -> Self {
        Self {
            name: name.into(),
            component: component.into(),
            params,
        }
    }
}

/// Declarative description of an agent tree.
///
/// This is the unit optimizers rewrite: a tuned agent is a new config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub llms: BTreeMap<String, ProviderConfig>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub templates: BTreeMap<String, Template>,
    pub nodes: Vec<NodeConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subagents: Vec<AgentConfig>,
    /// Custom step kinds used by this agent's nodes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_kinds: Vec<StepKind>,
}

impl AgentConfig {
    pub fn new(name: &str, nodes: Vec<NodeConfig>) -> Self {
        Self {
            name: name.into(),
            llms: BTreeMap::new(),
            templates: BTreeMap::new(),
            nodes,
            subagents: Vec::new(),
            step_kinds: Vec::new(),
        }
    }

    pub fn with_llm(mut self, slot: &str, config: ProviderConfig) -> Self {
        self.llms.insert(slot.into(), config);
        self
    }

    pub fn with_template(mut self, name: &str, template: Template) -> Self {
        self.templates.insert(name.into(), template);
        self
    }

    pub fn with_subagent(mut self, agent: AgentConfig) -> Self {
        self.subagents.push(agent);
        self
    }

    pub fn with_step_kind(mut self, kind: StepKind) -> Self {
        self.step_kinds.push(kind);
        self
    }

    /// Checks structural invariants of the whole tree.
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.name.is_empty() || self.name.contains('/') {
            return Err(AgentError::Config(format!(
                "agent name `{}` must be non-empty and contain no `/`",
                self.name
            )));
        }
        if self.nodes.is_empty() {
            return Err(AgentError::Config(format!("agent `{}` has no nodes", self.name)));
        }
        let mut names = HashSet::new();
        for node in &self.nodes {
            if !names.insert(node.name.as_str()) {
                return Err(AgentError::Config(format!(
                    "agent `{}` declares node `{}` twice",
                    self.name, node.name
                )));
            }
        }
        let mut children = HashSet::new();
        for sub in &self.subagents {
            if !children.insert(sub.name.as_str()) {
                return Err(AgentError::Config(format!(
                    "agent `{}` has two subagents named `{}`",
                    self.name, sub.name
                )));
            }
            sub.validate()?;
        }
        Ok(())
    }

    /// The config at an agent path such as `analyst/search_agent`.
    pub fn find(&self, path: &str) -> Option<&AgentConfig> {
        let mut parts = path.split('/');
        if parts.next()? != self.name {
            return None;
        }
        parts.try_fold(self, |agent, name| agent.subagents.iter().find(|s| s.name == name))
    }

    /// Visits this config and all descendants, depth first.
    pub fn walk<'a>(&'a self, visit: &mut dyn FnMut(&'a AgentConfig)) {
        visit(self);
        for sub in &self.subagents {
            sub.walk(visit);
        }
    }

    pub fn walk_mut(&mut self, visit: &mut dyn FnMut(&mut AgentConfig)) {
        visit(self);
        for sub in &mut self.subagents {
            sub.walk_mut(visit);
        }
    }

    /// Reads a JSON or YAML document; the format follows the extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AgentError> {
        let path = path.as_ref();
        let io = |message: String| AgentError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let yaml = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("yaml") | Some("yml")
        );
        let config: AgentConfig = if yaml {
            serde_yaml::from_str(&text).map_err(|e| io(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| io(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    /// Canonical JSON document (sorted keys).
    pub fn to_document(&self) -> String {
        let value = serde_json::to_value(self).expect("agent configs serialize");
        to_canonical_pretty(&value) + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AgentError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_document()).map_err(|e| AgentError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn leaf(name: &str) -> AgentConfig {
        AgentConfig::new(name, vec![NodeConfig::new("main", "echo", Value::Null)])
    }

    #[test]
    fn validation_rules() {
        assert!(leaf("a").validate().is_ok());
        assert!(AgentConfig::new("a", vec![]).validate().is_err());
        assert!(leaf("a/b").validate().is_err());
        let dup_nodes = AgentConfig::new(
            "a",
            vec![
                NodeConfig::new("n", "echo", Value::Null),
                NodeConfig::new("n", "echo", Value::Null),
            ],
        );
        assert!(dup_nodes.validate().is_err());
        let dup_subs = leaf("a").with_subagent(leaf("b")).with_subagent(leaf("b"));
        assert!(dup_subs.validate().is_err());
    }

    #[test]
    fn json_and_yaml_load_identically() {
        let dir = tempfile::tempdir().unwrap();
        let config = leaf("root")
            .with_template("system", Template::Text("be brief".into()))
            .with_llm("default", serde_json::from_value(json!({"kind": "mock", "script": ["hi"]})).unwrap())
            .with_subagent(leaf("child"));
        let json_path = dir.path().join("agent.json");
        config.save(&json_path).unwrap();
        let yaml_path = dir.path().join("agent.yaml");
        std::fs::write(&yaml_path, serde_yaml::to_string(&config).unwrap()).unwrap();
        assert_eq!(AgentConfig::load(&json_path).unwrap(), config);
        assert_eq!(AgentConfig::load(&yaml_path).unwrap(), config);
    }
}
