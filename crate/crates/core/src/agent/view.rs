//! Per-agent projections of a tape derived from its Call/Respond steps.

use serde::Serialize;

use super::error::AgentError;
use crate::tape::builtin::{Call, Respond, SetNextNode};
use crate::tape::Step;

/// What one agent sees of the tape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TapeView {
    pub agent_path: String,
    /// Visible step indices, strictly increasing.
    pub visible: Vec<usize>,
    /// The Call that activated this agent; `None` for the root.
    pub opened_by: Option<usize>,
    /// Last node of this agent that emitted a step in this view.
    pub last_node: Option<String>,
    /// Node requested by a SetNextNode in the agent's latest execution.
    pub next_node: Option<usize>,
    #[serde(skip)]
    last_execution: Option<(String, Option<String>)>,
}

impl TapeView {
    fn new(agent_path: String, opened_by: Option<usize>) -> Self {
        Self {
            agent_path,
            visible: opened_by.into_iter().collect(),
            opened_by,
            last_node: None,
            next_node: None,
            last_execution: None,
        }
    }

    pub fn steps<'a>(&'a self, steps: &'a [Step]) -> impl Iterator<Item = (usize, &'a Step)> + 'a {
        self.visible.iter().map(move |&i| (i, &steps[i]))
    }

    fn add(&mut self, index: usize, step: &Step) {
        if self.visible.last() != Some(&index) {
            self.visible.push(index);
        }
        if step.metadata.agent != self.agent_path {
            self.last_execution = None;
            return;
        }
        let execution = (step.metadata.node.clone(), step.metadata.prompt_id.clone());
        if self.last_execution.as_ref() != Some(&execution) {
            self.next_node = None;
            self.last_execution = Some(execution);
        }
        if let Some(set) = SetNextNode::from_step(step) {
            self.next_node = Some(set.next_node);
        }
        if !step.metadata.node.is_empty() {
            self.last_node = Some(step.metadata.node.clone());
        }
    }
}

/// Stack of views; bottom is the root agent, top is the active agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TapeViewStack {
    pub views: Vec<TapeView>,
}

impl TapeViewStack {
    pub fn top(&self) -> &TapeView {
        self.views.last().expect("a view stack always holds the root view")
    }

    pub fn root(&self) -> &TapeView {
        &self.views[0]
    }

    pub fn depth(&self) -> usize {
        self.views.len()
    }

    /// Path of the agent owning the top view.
    pub fn active_path(&self) -> &str {
        &self.top().agent_path
    }
}

/// Maps the `agent_name` of a Call made by `caller` to the callee's path.
pub trait CallResolver {
    fn resolve(&self, caller: &str, name: &str) -> Option<String>;
}

/// Treats every callee as a direct child of its caller.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChildPaths;

impl CallResolver for ChildPaths {
    fn resolve(&self, caller: &str, name: &str) -> Option<String> {
        (!name.is_empty()).then(|| format!("{caller}/{name}"))
    }
}

/// How agent views are derived from a tape.
pub trait ViewStrategy: Send + Sync {
    fn compute(&self, steps: &[Step], root: &str, resolver: &dyn CallResolver) -> Result<TapeViewStack, AgentError>;
}

/// The default strategy: a caller sees its sub-calls only through their
/// Call and Respond steps.
#[derive(Debug, Clone, Copy, Default)]
pub struct StackViews;

impl ViewStrategy for StackViews {
    fn compute(&self, steps: &[Step], root: &str, resolver: &dyn CallResolver) -> Result<TapeViewStack, AgentError> {
        compute_view_stack(steps, root, resolver)
    }
}

pub fn compute_view_stack(
    steps: &[Step],
    root: &str,
    resolver: &dyn CallResolver,
) -> Result<TapeViewStack, AgentError> {
    let mut views = vec![TapeView::new(root.to_string(), None)];
    for (index, step) in steps.iter().enumerate() {
        if let Some(call) = Call::from_step(step) {
            let top = views.last_mut().expect("non-empty");
            top.add(index, step);
            let callee = resolver
                .resolve(&top.agent_path, &call.agent_name)
                .ok_or_else(|| AgentError::UnknownAgent {
                    caller: top.agent_path.clone(),
                    name: call.agent_name.clone(),
                })?;
            views.push(TapeView::new(callee, Some(index)));
        } else if step.kind == Respond::KIND {
            if views.len() == 1 {
                return Err(AgentError::UnbalancedRespond { index });
            }
            let mut closed = views.pop().expect("depth checked");
            closed.add(index, step);
            views.last_mut().expect("non-empty").add(index, step);
        } else {
            views.last_mut().expect("non-empty").add(index, step);
        }
    }
    Ok(TapeViewStack { views })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::agent_metadata;
    use crate::tape::builtin::*;

    fn by(step: Step, agent: &str, node: &str, prompt: Option<&str>) -> Step {
        step.with_metadata(agent_metadata(agent, node, prompt.map(String::from)))
    }

    #[test]
    fn no_calls_single_root_view() {
        let steps: Vec<Step> = (0..4).map(|i| UserMessage::new(i.to_string()).into_step()).collect();
        let stack = compute_view_stack(&steps, "root", &ChildPaths).unwrap();
        assert_eq!(stack.depth(), 1);
        assert_eq!(stack.top().visible, [0, 1, 2, 3]);
        assert_eq!(stack.active_path(), "root");
    }

    #[test]
    fn empty_tape_is_root() {
        let stack = compute_view_stack(&[], "root", &ChildPaths).unwrap();
        assert_eq!(stack.active_path(), "root");
        assert!(stack.top().visible.is_empty());
    }

    #[test]
    fn nested_calls() {
        let steps = vec![
            Call::new("b", "x").into_step(),
            Call::new("c", "y").into_step(),
            Respond::new("z").into_step(),
        ];
        let stack = compute_view_stack(&steps[..1], "a", &ChildPaths).unwrap();
        assert_eq!(stack.active_path(), "a/b");
        let stack = compute_view_stack(&steps, "a", &ChildPaths).unwrap();
        assert_eq!(stack.active_path(), "a/b");
        assert_eq!(stack.top().visible, [0, 1, 2]);
        assert_eq!(stack.root().visible, [0]);
    }

    #[test]
    fn unbalanced_respond() {
        let steps = vec![Respond::new("z").into_step()];
        assert!(matches!(
            compute_view_stack(&steps, "a", &ChildPaths),
            Err(AgentError::UnbalancedRespond { index: 0 })
        ));
    }

    #[test]
    fn next_node_comes_from_latest_execution() {
        let steps = vec![
            UserMessage::new("hi").into_step(),
            by(SetNextNode::new(1).into_step(), "a", "plan", Some("p1")),
            by(AssistantMessage::new("x").into_step(), "a", "plan", Some("p1")),
            UserMessage::new("again").into_step(),
        ];
        let stack = compute_view_stack(&steps, "a", &ChildPaths).unwrap();
        assert_eq!(stack.top().next_node, Some(1));
        assert_eq!(stack.top().last_node.as_deref(), Some("plan"));

        let mut more = steps.clone();
        more.push(by(AssistantMessage::new("y").into_step(), "a", "act", Some("p2")));
        let stack = compute_view_stack(&more, "a", &ChildPaths).unwrap();
        assert_eq!(stack.top().next_node, None);
        assert_eq!(stack.top().last_node.as_deref(), Some("act"));
    }

    #[test]
    fn callee_view_starts_fresh() {
        let steps = vec![
            by(SetNextNode::new(1).into_step(), "a", "act", Some("p1")),
            by(Call::new("b", "q").into_step(), "a", "act", Some("p1")),
            by(AssistantMessage::new("r").into_step(), "a/b", "main", Some("p2")),
        ];
        let stack = compute_view_stack(&steps[..2], "a", &ChildPaths).unwrap();
        assert_eq!(stack.top().last_node, None);
        assert_eq!(stack.top().next_node, None);
        assert_eq!(stack.views[0].next_node, Some(1));
        let stack = compute_view_stack(&steps, "a", &ChildPaths).unwrap();
        assert_eq!(stack.top().last_node.as_deref(), Some("main"));
    }
}
