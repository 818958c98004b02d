//! Canonical tape documents.
//!
//! A tape is stored as one UTF-8 JSON document with a top-level `steps` array
//! and a `metadata` object. Object keys are always emitted in sorted order,
//! so two tapes serialize to the same bytes iff their contents are equal.
//! Batches of tapes use one compact document per line.

use std::io::{BufRead, Write};

use serde::ser::{Serialize, SerializeMap, SerializeSeq, Serializer};
use serde_json::{Map, Value};

use super::error::TapeError;
use super::record::{Tape, TapeMetadata};
use super::registry::StepRegistry;
use super::step::{Step, StepCategory, StepMetadata};

pub const TAPE_FILE_EXTENSION: &str = ".tape.json";

/// How unregistered step kinds are handled when decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    #[default]
    Strict,
    /// Unknown kinds are kept with their payload as-is.
    Lenient,
}

/// Serializes a JSON value with object keys sorted at every level.
struct Canonical<'a>(&'a Value);

impl Serialize for Canonical<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Value::Object(map) => {
                let mut entries: Vec<(&String, &Value)> = map.iter().collect();
                entries.sort_by(|a, b| a.0.cmp(b.0));
                let mut out = serializer.serialize_map(Some(entries.len()))?;
                for (key, value) in entries {
                    out.serialize_entry(key, &Canonical(value))?;
                }
                out.end()
            }
            Value::Array(items) => {
                let mut out = serializer.serialize_seq(Some(items.len()))?;
                for item in items {
                    out.serialize_element(&Canonical(item))?;
                }
                out.end()
            }
            other => other.serialize(serializer),
        }
    }
}

pub fn to_canonical_string(value: &Value) -> String {
    serde_json::to_string(&Canonical(value)).expect("json values always serialize")
}

pub fn to_canonical_pretty(value: &Value) -> String {
    serde_json::to_string_pretty(&Canonical(value)).expect("json values always serialize")
}

pub fn tape_to_value(tape: &Tape) -> Value {
    let steps: Vec<Value> = tape.steps().iter().map(Step::to_document).collect();
    let mut doc = Map::new();
    doc.insert(
        "metadata".into(),
        serde_json::to_value(tape.metadata()).expect("metadata serializes"),
    );
    doc.insert("steps".into(), Value::Array(steps));
    Value::Object(doc)
}

/// Pretty canonical document, newline-terminated.
pub fn serialize(tape: &Tape) -> Vec<u8> {
    let mut text = to_canonical_pretty(&tape_to_value(tape));
    text.push('\n');
    text.into_bytes()
}

pub fn deserialize(registry: &StepRegistry, bytes: &[u8], mode: DecodeMode) -> Result<Tape, TapeError> {
    let value: Value = serde_json::from_slice(bytes)?;
    tape_from_value(registry, value, mode)
}

pub fn tape_from_value(registry: &StepRegistry, value: Value, mode: DecodeMode) -> Result<Tape, TapeError> {
    let Value::Object(mut doc) = value else {
        return Err(TapeError::Malformed("tape document must be an object".into()));
    };
    let metadata: TapeMetadata = match doc.remove("metadata") {
        Some(meta) => serde_json::from_value(meta)?,
        None => return Err(TapeError::Malformed("missing `metadata`".into())),
    };
    let steps = match doc.remove("steps") {
        Some(Value::Array(steps)) => steps,
        Some(_) => return Err(TapeError::Malformed("`steps` must be an array".into())),
        None => return Err(TapeError::Malformed("missing `steps`".into())),
    };
    if let Some(extra) = doc.keys().next() {
        return Err(TapeError::Malformed(format!("unexpected top-level key `{extra}`")));
    }
    let steps = steps
        .into_iter()
        .enumerate()
        .map(|(i, step)| {
            step_from_document(registry, step, mode).map_err(|e| match e {
                TapeError::Malformed(m) => TapeError::Malformed(format!("step {i}: {m}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Tape::from_parts(steps, metadata)
}

pub fn step_from_document(registry: &StepRegistry, value: Value, mode: DecodeMode) -> Result<Step, TapeError> {
    let Value::Object(mut payload) = value else {
        return Err(TapeError::Malformed("step must be an object".into()));
    };
    let kind = match payload.remove("kind") {
        Some(Value::String(kind)) => kind,
        _ => return Err(TapeError::Malformed("missing string `kind`".into())),
    };
    let metadata: StepMetadata = match payload.remove("metadata") {
        Some(meta) => serde_json::from_value(meta)?,
        None => return Err(TapeError::Malformed("missing step `metadata`".into())),
    };
    let category: Option<StepCategory> = payload
        .remove("category")
        .map(serde_json::from_value)
        .transpose()?;
    let category = match (registry.get(&kind), mode) {
        (Some(def), _) => category.unwrap_or(def.category),
        (None, DecodeMode::Strict) => return Err(TapeError::UnknownKind(kind)),
        (None, DecodeMode::Lenient) => category.ok_or_else(|| {
            TapeError::Malformed(format!("unknown kind `{kind}` without a category"))
        })?,
    };
    let step = Step {
        kind,
        category,
        payload,
        metadata,
    };
    if registry.contains(&step.kind) {
        registry.validate(&step)?;
    }
    Ok(step)
}

/// Writes tapes as newline-delimited compact canonical documents.
pub fn write_batch<W: Write>(mut out: W, tapes: &[Tape]) -> std::io::Result<()> {
    for tape in tapes {
        writeln!(out, "{}", to_canonical_string(&tape_to_value(tape)))?;
    }
    Ok(())
}

pub fn read_batch<R: BufRead>(registry: &StepRegistry, input: R, mode: DecodeMode) -> Result<Vec<Tape>, TapeError> {
    let mut tapes = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| TapeError::Malformed(format!("line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)?;
        tapes.push(tape_from_value(registry, value, mode)?);
    }
    Ok(tapes)
}
