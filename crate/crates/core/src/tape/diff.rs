use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::record::Tape;
use super::step::Step;

/// Which normally-masked fields take part in a comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffOptions {
    /// Compare `metadata.agent`, `metadata.node` and `metadata.other`.
    pub attribution: bool,
    /// Compare step ids, prompt ids and tape-level timestamps.
    pub volatile: bool,
}

impl DiffOptions {
    pub fn strict() -> Self {
        Self {
            attribution: true,
            volatile: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DiffEntry {
    Equal { index: usize },
    Changed { index: usize, paths: Vec<String> },
    OnlyInA { index: usize },
    OnlyInB { index: usize },
}

impl DiffEntry {
    pub fn index(&self) -> usize {
        match self {
            DiffEntry::Equal { index }
            | DiffEntry::Changed { index, .. }
            | DiffEntry::OnlyInA { index }
            | DiffEntry::OnlyInB { index } => *index,
        }
    }

    pub fn is_equal(&self) -> bool {
        matches!(self, DiffEntry::Equal { .. })
    }
}

/// Per-index comparison of two tapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffReport {
    pub entries: Vec<DiffEntry>,
}

impl DiffReport {
    /// True when no entry differs.
    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(DiffEntry::is_equal)
    }

    pub fn differences(&self) -> impl Iterator<Item = &DiffEntry> {
        self.entries.iter().filter(|e| !e.is_equal())
    }

    pub fn first_difference(&self) -> Option<usize> {
        self.differences().next().map(DiffEntry::index)
    }

    /// Human-readable listing of the differing entries.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for entry in self.differences() {
            let line = match entry {
                DiffEntry::Changed { index, paths } => format!("~ {index}: {}", paths.join(", ")),
                DiffEntry::OnlyInA { index } => format!("- {index}"),
                DiffEntry::OnlyInB { index } => format!("+ {index}"),
                DiffEntry::Equal { .. } => continue,
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

pub fn diff(a: &Tape, b: &Tape) -> DiffReport {
    diff_with(a, b, DiffOptions::default())
}

pub fn diff_with(a: &Tape, b: &Tape, options: DiffOptions) -> DiffReport {
    let len = a.len().max(b.len());
    let entries = (0..len)
        .map(|index| match (a.steps().get(index), b.steps().get(index)) {
            (Some(x), Some(y)) => {
                let paths = step_differences(x, y, options);
                if paths.is_empty() {
                    DiffEntry::Equal { index }
                } else {
                    DiffEntry::Changed { index, paths }
                }
            }
            (Some(_), None) => DiffEntry::OnlyInA { index },
            (None, _) => DiffEntry::OnlyInB { index },
        })
        .collect();
    DiffReport { entries }
}

/// Field paths at which two steps differ under `options`.
pub fn step_differences(a: &Step, b: &Step, options: DiffOptions) -> Vec<String> {
    let mut paths = Vec::new();
    if a.kind != b.kind {
        paths.push("kind".to_string());
    }
    if a.category != b.category {
        paths.push("category".to_string());
    }
    let mut keys: Vec<&String> = a.payload.keys().chain(b.payload.keys()).collect();
    keys.sort();
    keys.dedup();
    for key in keys {
        value_differences(key, a.payload.get(key), b.payload.get(key), &mut paths);
    }
    let (ma, mb) = (&a.metadata, &b.metadata);
    if options.attribution {
        if ma.agent != mb.agent {
            paths.push("metadata.agent".into());
        }
        if ma.node != mb.node {
            paths.push("metadata.node".into());
        }
        if ma.other != mb.other {
            paths.push("metadata.other".into());
        }
    }
    if options.volatile {
        if ma.id != mb.id {
            paths.push("metadata.id".into());
        }
        if ma.prompt_id != mb.prompt_id {
            paths.push("metadata.prompt_id".into());
        }
    }
    paths
}

fn value_differences(path: &str, a: Option<&Value>, b: Option<&Value>, out: &mut Vec<String>) {
    match (a, b) {
        (Some(Value::Object(x)), Some(Value::Object(y))) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for key in keys {
                value_differences(&format!("{path}.{key}"), x.get(key), y.get(key), out);
            }
        }
        (Some(Value::Array(x)), Some(Value::Array(y))) if x.len() == y.len() => {
            for (i, (p, q)) in x.iter().zip(y).enumerate() {
                value_differences(&format!("{path}[{i}]"), Some(p), Some(q), out);
            }
        }
        (x, y) if x != y => out.push(path.to_string()),
        _ => {}
    }
}
