use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tools::{self, Corpus, CorpusRecord, ToolEnvironment, ToolRegistry, DEFAULT_ENV_NAME};
use super::EnvError;

pub const DEFAULT_TOP_K: usize = 3;

/// One enabled tool and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ToolConfig {
    Calculator {
        #[serde(default = "calculator_name")]
        name: String,
    },
    Search {
        #[serde(default = "search_name")]
        name: String,
        /// Newline-delimited corpus file, relative to the config file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        corpus: Option<PathBuf>,
        /// Inline records, searched after those from `corpus`.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        records: Vec<CorpusRecord>,
        #[serde(default = "default_top_k")]
        top_k: usize,
    },
    UserReply {
        #[serde(default = "user_reply_name")]
        name: String,
        replies: Vec<String>,
    },
    Lookup {
        name: String,
        #[serde(default)]
        description: String,
        #[serde(default = "lookup_argument")]
        argument: String,
        table: BTreeMap<String, Value>,
    },
}

fn calculator_name() -> String {
    "calculator".into()
}

fn search_name() -> String {
    "search".into()
}

fn user_reply_name() -> String {
    "user_reply".into()
}

fn lookup_argument() -> String {
    "key".into()
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_env_name() -> String {
    DEFAULT_ENV_NAME.into()
}

/// Which tools an environment offers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    #[serde(default = "default_env_name")]
    pub name: String,
    #[serde(default)]
    pub tools: Vec<ToolConfig>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            name: default_env_name(),
            tools: Vec::new(),
        }
    }
}

impl EnvConfig {
    /// Reads a JSON or YAML config. Relative corpus paths are resolved
    /// against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let path = path.as_ref();
        let io = |message: String| EnvError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml"));
        let mut config: EnvConfig = if yaml {
            serde_yaml::from_str(&text).map_err(|e| io(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| io(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for tool in &mut config.tools {
            if let ToolConfig::Search {
                corpus: Some(corpus), ..
            } = tool
            {
                if corpus.is_relative() {
                    *corpus = base.join(&*corpus);
                }
            }
        }
        Ok(config)
    }

    pub fn build(&self) -> Result<ToolEnvironment, EnvError> {
        let mut registry = ToolRegistry::new();
        for tool in &self.tools {
            let tool = match tool {
                ToolConfig::Calculator { name } => tools::calculator(name),
                ToolConfig::Search {
                    name,
                    corpus,
                    records,
                    top_k,
                } => {
                    let mut all = match corpus {
                        Some(path) => Corpus::load(path)?.records().to_vec(),
                        None => Vec::new(),
                    };
                    all.extend(records.iter().cloned());
                    tools::search(name, Corpus::new(all), *top_k)
                }
                ToolConfig::UserReply { name, replies } => tools::user_reply(name, replies.clone()),
                ToolConfig::Lookup {
                    name,
                    description,
                    argument,
                    table,
                } => tools::lookup(name, description, argument, table.clone()),
            };
            registry.register(tool)?;
        }
        Ok(ToolEnvironment::new(registry).with_name(&self.name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Environment;

    #[test]
    fn loads_yaml_with_relative_corpus() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("docs.jsonl"), "{\"id\":\"a\",\"title\":\"T\",\"text\":\"x\"}\n").unwrap();
        let path = dir.path().join("env.yaml");
        fs::write(
            &path,
            "tools:\n  - type: calculator\n  - type: search\n    corpus: docs.jsonl\n  - type: user_reply\n    replies: [hi]\n",
        )
        .unwrap();
        let env = EnvConfig::load(&path).unwrap().build().unwrap();
        let names: Vec<String> = env.tool_schemas().into_iter().map(|s| s.name).collect();
        assert_eq!(names, ["calculator", "search", "user_reply"]);
        assert_eq!(env.name(), DEFAULT_ENV_NAME);
    }

    #[test]
    fn duplicate_tools_are_rejected() {
        let config = EnvConfig {
            tools: vec![
                ToolConfig::Calculator { name: "calc".into() },
                ToolConfig::Calculator { name: "calc".into() },
            ],
            ..EnvConfig::default()
        };
        assert!(matches!(config.build(), Err(EnvError::DuplicateTool(name)) if name == "calc"));
    }
}
