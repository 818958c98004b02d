use std::collections::BTreeMap;
use std::sync::Arc;

use super::config::{AgentConfig, NodeConfig};
use super::error::AgentError;
use super::node::Node;
use super::view::{CallResolver, StackViews, TapeView, TapeViewStack, ViewStrategy};
use crate::llm::{CallDb, LlmClient, LlmProvider};
use crate::tape::{Step, StepKind, StepRegistry};

pub type NodeFactory =
    Arc<dyn Fn(&NodeConfig, &AgentConfig, &StepRegistry) -> Result<Arc<dyn Node>, AgentError> + Send + Sync>;

struct Component {
    kinds: Vec<StepKind>,
    factory: NodeFactory,
}

/// Maps component names used in configs to node constructors.
#[derive(Default, Clone)]
pub struct ComponentRegistry {
    components: BTreeMap<String, Arc<Component>>,
}

impl ComponentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a component together with the step kinds its nodes emit.
    pub fn register(
        &mut self,
        name: &str,
        kinds: Vec<StepKind>,
        factory: impl Fn(&NodeConfig, &AgentConfig, &StepRegistry) -> Result<Arc<dyn Node>, AgentError>
            + Send
            + Sync
            + 'static,
    ) {
        self.components.insert(
            name.into(),
            Arc::new(Component {
                kinds,
                factory: Arc::new(factory),
            }),
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.components.contains_key(name)
    }

    /// Builds an agent tree. Every LLM client records into `db` when given.
    pub fn build(&self, config: &AgentConfig, db: Option<Arc<CallDb>>) -> Result<Agent, AgentError> {
        config.validate()?;
        let mut registry = StepRegistry::default();
        let mut error = None;
        config.walk(&mut |agent| {
            for node in &agent.nodes {
                let Some(component) = self.components.get(&node.component) else {
                    error.get_or_insert(AgentError::UnknownComponent(node.component.clone()));
                    continue;
                };
                for kind in &component.kinds {
                    if let Err(e) = registry.ensure(kind.clone()) {
                        error.get_or_insert(e.into());
                    }
                }
            }
            for kind in &agent.step_kinds {
                if let Err(e) = registry.ensure(kind.clone()) {
                    error.get_or_insert(e.into());
                }
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        let registry = Arc::new(registry);
        self.build_node(config, &registry, db.as_ref())
    }

    fn build_node(
        &self,
        config: &AgentConfig,
        registry: &Arc<StepRegistry>,
        db: Option<&Arc<CallDb>>,
    ) -> Result<Agent, AgentError> {
        let nodes = config
            .nodes
            .iter()
            .map(|node| {
                let component = self
                    .components
                    .get(&node.component)
                    .ok_or_else(|| AgentError::UnknownComponent(node.component.clone()))?;
                (component.factory)(node, config, registry)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let llms = config
            .llms
            .iter()
            .map(|(slot, provider)| {
                let mut client = LlmClient::new(provider.build()?);
                if let Some(db) = db {
                    client = client.with_recorder(db.clone());
                }
                Ok((slot.clone(), client))
            })
            .collect::<Result<BTreeMap<_, _>, AgentError>>()?;
        let subagents = config
            .subagents
            .iter()
            .map(|sub| self.build_node(sub, registry, db))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Agent {
            config: Arc::new(config.clone()),
            nodes,
            llms,
            subagents,
            registry: registry.clone(),
            views: Arc::new(StackViews),
        })
    }
}

/// A built agent tree: nodes, LLM clients and subagents.
///
/// Cloning is cheap; nodes are shared.
#[derive(Clone)]
pub struct Agent {
    config: Arc<AgentConfig>,
    nodes: Vec<Arc<dyn Node>>,
    llms: BTreeMap<String, LlmClient>,
    subagents: Vec<Agent>,
    registry: Arc<StepRegistry>,
    views: Arc<dyn ViewStrategy>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("name", &self.config.name)
            .field("nodes", &self.node_names())
            .field("llms", &self.llms)
            .field("subagents", &self.subagents)
            .finish()
    }
}

impl Agent {
    pub fn name(&self) -> &str {
        &self.config.name
    }

    /// The config this agent was built from, including subagents.
    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn to_config(&self) -> AgentConfig {
        (*self.config).clone()
    }

    pub fn registry(&self) -> &StepRegistry {
        &self.registry
    }

    pub fn shared_registry(&self) -> Arc<StepRegistry> {
        self.registry.clone()
    }

    pub fn nodes(&self) -> &[Arc<dyn Node>] {
        &self.nodes
    }

    pub fn node_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name()).collect()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name() == name)
    }

    pub fn subagents(&self) -> &[Agent] {
        &self.subagents
    }

    /// Finds the agent at `path` (root name first, `/`-separated).
    pub fn find(&self, path: &str) -> Option<&Agent> {
        let mut segments = path.split('/');
        if segments.next()? != self.name() {
            return None;
        }
        let mut current = self;
        for segment in segments {
            current = current.subagents.iter().find(|a| a.name() == segment)?;
        }
        Some(current)
    }

    /// LLM client for `slot`, looked up on the agent at `path` and then on
    /// its ancestors.
    pub fn client_for(&self, path: &str, slot: &str) -> Result<&LlmClient, AgentError> {
        let mut cursor = path;
        loop {
            if let Some(client) = self.find(cursor).and_then(|a| a.llms.get(slot)) {
                return Ok(client);
            }
            match cursor.rsplit_once('/') {
                Some((parent, _)) => cursor = parent,
                None => {
                    return Err(AgentError::MissingLlm {
                        agent: path.to_string(),
                        slot: slot.to_string(),
                    })
                }
            }
        }
    }

    /// Copy of the tree in which every LLM slot uses `provider`.
    pub fn with_provider(&self, provider: Arc<dyn LlmProvider>, db: Option<Arc<CallDb>>) -> Agent {
        let mut agent = self.clone();
        agent.replace_clients(&provider, db.as_ref());
        agent
    }

    fn replace_clients(&mut self, provider: &Arc<dyn LlmProvider>, db: Option<&Arc<CallDb>>) {
        for client in self.llms.values_mut() {
            let mut replaced = LlmClient::new(provider.clone());
            if let Some(db) = db {
                replaced = replaced.with_recorder(db.clone());
            }
            *client = replaced;
        }
        for sub in &mut self.subagents {
            sub.replace_clients(provider, db);
        }
    }

    pub fn with_view_strategy(mut self, strategy: Arc<dyn ViewStrategy>) -> Agent {
        self.views = strategy.clone();
        for sub in &mut self.subagents {
            *sub = sub.clone().with_view_strategy(strategy.clone());
        }
        self
    }

    pub fn view_stack(&self, steps: &[Step]) -> Result<TapeViewStack, AgentError> {
        self.views.compute(steps, self.name(), self)
    }

    /// Path of the agent that must act next on `steps`.
    pub fn active_agent(&self, steps: &[Step]) -> Result<String, AgentError> {
        let stack = self.view_stack(steps)?;
        let path = stack.active_path().to_string();
        if self.find(&path).is_none() {
            return Err(AgentError::UnknownAgent {
                caller: path.clone(),
                name: path,
            });
        }
        Ok(path)
    }
}

impl CallResolver for Agent {
    /// A child of the caller first, then a sibling, then any deeper
    /// descendant of the caller.
    fn resolve(&self, caller: &str, name: &str) -> Option<String> {
        let agent = self.find(caller)?;
        if agent.subagents.iter().any(|a| a.name() == name) {
            return Some(format!("{caller}/{name}"));
        }
        if let Some((parent, _)) = caller.rsplit_once('/') {
            let siblings = self.find(parent)?;
            if siblings.subagents.iter().any(|a| a.name() == name) {
                return Some(format!("{parent}/{name}"));
            }
        }
        let mut frontier: Vec<(String, &Agent)> = vec![(caller.to_string(), agent)];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for (path, node) in frontier {
                for sub in &node.subagents {
                    let sub_path = format!("{path}/{}", sub.name());
                    if sub.name() == name {
                        return Some(sub_path);
                    }
                    next.push((sub_path, sub));
                }
            }
            frontier = next;
        }
        None
    }
}

/// Chooses the node that runs next for the agent owning `view`.
pub fn select_node(agent: &Agent, view: &TapeView) -> Result<usize, AgentError> {
    let len = agent.nodes.len();
    if let Some(index) = view.next_node {
        if index >= len {
            return Err(AgentError::NodeOutOfRange {
                agent: view.agent_path.clone(),
                index,
                len,
            });
        }
        return Ok(index);
    }
    let Some(last) = &view.last_node else {
        return Ok(0);
    };
    let index = agent.node_index(last).ok_or_else(|| AgentError::UnknownNode {
        agent: view.agent_path.clone(),
        node: last.clone(),
    })?;
    if index + 1 >= len {
        return Err(AgentError::NodeExhausted {
            agent: view.agent_path.clone(),
        });
    }
    Ok(index + 1)
}
