//! Ready-made node components.

pub mod dialog;
pub mod function;
pub mod mono;
pub mod team;

use crate::agent::{ComponentRegistry, NodeContext};

/// Every built-in component under its config name.
pub fn standard_components() -> ComponentRegistry {
    let mut registry = ComponentRegistry::new();
    registry.register(mono::COMPONENT, Vec::new(), mono::factory);
    registry.register(team::COMPONENT, Vec::new(), team::factory);
    registry.register(function::COMPONENT, Vec::new(), function::factory);
    registry.register(dialog::PLAN, vec![dialog::thought_kind()], dialog::plan_factory);
    registry.register(dialog::ACT, Vec::new(), dialog::act_factory);
    registry.register(dialog::HELPER, Vec::new(), dialog::helper_factory);
    registry
}

/// `text` itself, or the text template it names.
pub(crate) fn resolve_text(ctx: &NodeContext<'_>, text: &str) -> String {
    ctx.template(text)
        .and_then(|t| t.as_text())
        .unwrap_or(text)
        .to_string()
}
