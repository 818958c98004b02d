use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::error::TapeError;
use super::step::{Step, StepCategory};

/// Field names that collide with the flat step document layout.
const RESERVED_FIELDS: &[&str] = &["kind", "category", "metadata"];

/// Kinds that every registry carries and that cannot be re-registered.
pub const BUILTIN_KINDS: &[&str] = &[
    "call",
    "respond",
    "set_next_node",
    "user_message",
    "assistant_message",
    "tool_calls",
    "tool_result",
    "action_failure",
    "parse_failure",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    String,
    Integer,
    /// Integer `>= 0`.
    Index,
    Number,
    Boolean,
    Array,
    Object,
    Any,
}

impl FieldType {
    fn accepts(self, value: &Value) -> bool {
        match self {
            FieldType::String => value.is_string(),
            FieldType::Integer => value.is_i64() || value.is_u64(),
            FieldType::Index => value.is_u64(),
            FieldType::Number => value.is_number(),
            FieldType::Boolean => value.is_boolean(),
            FieldType::Array => value.is_array(),
            FieldType::Object => value.is_object(),
            FieldType::Any => true,
        }
    }

    fn json_type(self) -> Option<&'static str> {
        match self {
            FieldType::String => Some("string"),
            FieldType::Integer | FieldType::Index => Some("integer"),
            FieldType::Number => Some("number"),
            FieldType::Boolean => Some("boolean"),
            FieldType::Array => Some("array"),
            FieldType::Object => Some("object"),
            FieldType::Any => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: FieldType,
    #[serde(default = "default_true")]
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

fn default_true() -> bool {
    true
}

impl FieldSpec {
    pub fn required(name: &str, ty: FieldType) -> Self {
        Self {
            name: name.into(),
            ty,
            required: true,
            description: String::new(),
        }
    }

    pub fn optional(name: &str, ty: FieldType) -> Self {
        Self {
            required: false,
            ..Self::required(name, ty)
        }
    }

    pub fn describe(mut self, description: &str) -> Self {
        self.description = description.into();
        self
    }
}

/// Flat object schema for a step payload. Unknown fields are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PayloadSchema {
    pub fields: Vec<FieldSpec>,
}

impl PayloadSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Self {
        Self { fields }
    }

    pub fn validate(&self, kind: &str, payload: &Map<String, Value>) -> Result<(), TapeError> {
        let invalid = |message: String| TapeError::Validation {
            kind: kind.to_string(),
            message,
        };
        for field in &self.fields {
            match payload.get(&field.name) {
                None if field.required => return Err(invalid(format!("missing required field `{}`", field.name))),
                // null is a value like any other for untyped fields
                Some(Value::Null) if field.required && field.ty != FieldType::Any => {
                    return Err(invalid(format!("missing required field `{}`", field.name)))
                }
                None | Some(Value::Null) => {}
                Some(value) if !field.ty.accepts(value) => {
                    return Err(invalid(format!(
                        "field `{}` expects {:?}, got {}",
                        field.name, field.ty, value
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = payload
            .keys()
            .find(|key| !self.fields.iter().any(|f| &f.name == *key))
        {
            return Err(invalid(format!("unknown field `{extra}`")));
        }
        Ok(())
    }

    /// JSON-schema rendering used when showing step schemas to an LLM.
    pub fn to_json_schema(&self) -> Value {
        let mut properties = Map::new();
        let mut required = Vec::new();
        for field in &self.fields {
            let mut prop = Map::new();
            if let Some(ty) = field.ty.json_type() {
                prop.insert("type".into(), json!(ty));
            }
            if field.ty == FieldType::Index {
                prop.insert("minimum".into(), json!(0));
            }
            if !field.description.is_empty() {
                prop.insert("description".into(), json!(field.description));
            }
            properties.insert(field.name.clone(), Value::Object(prop));
            if field.required {
                required.push(json!(field.name));
            }
        }
        json!({ "type": "object", "properties": properties, "required": required })
    }
}

/// Registered definition of a step kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepKind {
    pub kind: String,
    pub category: StepCategory,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub fields: Vec<FieldSpec>,
}

impl StepKind {
    pub fn new(kind: &str, category: StepCategory, fields: Vec<FieldSpec>) -> Self {
        Self {
            kind: kind.into(),
            category,
            description: String::new(),
            fields,
        }
    }

    pub fn describe(mut self, description: &str) -> Self {
        self.description = description.into();
        self
    }

    pub fn schema(&self) -> PayloadSchema {
        PayloadSchema::new(self.fields.clone())
    }

    /// Schema document for prompts: kind discriminator plus payload fields.
    pub fn to_prompt_schema(&self) -> Value {
        let mut schema = self.schema().to_json_schema();
        let obj = schema.as_object_mut().expect("schema is an object");
        obj.get_mut("properties")
            .and_then(Value::as_object_mut)
            .expect("properties present")
            .insert("kind".into(), json!({ "const": self.kind }));
        obj.get_mut("required")
            .and_then(Value::as_array_mut)
            .expect("required present")
            .insert(0, json!("kind"));
        if !self.description.is_empty() {
            obj.insert("description".into(), json!(self.description));
        }
        obj.insert("title".into(), json!(self.kind));
        schema
    }
}

/// Map from step kind to its category and payload schema.
///
/// Built once at startup and shared read-only afterwards.
#[derive(Debug, Clone)]
pub struct StepRegistry {
    kinds: IndexMap<String, StepKind>,
}

impl Default for StepRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl StepRegistry {
    pub fn with_builtins() -> Self {
        use FieldType::*;
        use StepCategory::*;
        let builtins = [
            StepKind::new(
                "call",
                Thought,
                vec![
                    FieldSpec::required("agent_name", String),
                    FieldSpec::required("content", String),
                ],
            )
            .describe("Delegate to another agent"),
            StepKind::new("respond", Thought, vec![FieldSpec::required("content", String)])
                .describe("Return control to the calling agent"),
            StepKind::new("set_next_node", Control, vec![FieldSpec::required("next_node", Index)])
                .describe("Choose the node that runs at the next iteration"),
            StepKind::new("user_message", Observation, vec![FieldSpec::required("content", String)])
                .describe("Message from the user"),
            StepKind::new("assistant_message", Action, vec![FieldSpec::required("content", String)])
                .describe("Message to the user"),
            StepKind::new("tool_calls", Action, vec![FieldSpec::required("tool_calls", Array)])
                .describe("Request one or more tool invocations"),
            StepKind::new(
                "tool_result",
                Observation,
                vec![
                    FieldSpec::required("call_id", String),
                    FieldSpec::required("tool_name", String),
                    FieldSpec::required("result", Any),
                    FieldSpec::required("text", String),
                ],
            )
            .describe("Result of a tool invocation"),
            StepKind::new(
                "action_failure",
                Observation,
                vec![
                    FieldSpec::optional("call_id", String),
                    FieldSpec::required("reason", String),
                ],
            )
            .describe("An action could not be carried out"),
            StepKind::new(
                "parse_failure",
                Observation,
                vec![
                    FieldSpec::required("raw", String),
                    FieldSpec::required("error", String),
                ],
            )
            .describe("LLM output could not be parsed into steps"),
        ];
        let kinds = builtins.into_iter().map(|k| (k.kind.clone(), k)).collect();
        Self { kinds }
    }

    pub fn register(&mut self, kind: StepKind) -> Result<(), TapeError> {
        if BUILTIN_KINDS.contains(&kind.kind.as_str()) {
            return Err(TapeError::ReservedKind(kind.kind));
        }
        if self.kinds.contains_key(&kind.kind) {
            return Err(TapeError::DuplicateKind(kind.kind));
        }
        if kind.kind.is_empty() {
            return Err(TapeError::InvalidSchema {
                kind: kind.kind,
                message: "kind must be non-empty".into(),
            });
        }
        for (i, field) in kind.fields.iter().enumerate() {
            if RESERVED_FIELDS.contains(&field.name.as_str()) {
                return Err(TapeError::InvalidSchema {
                    kind: kind.kind.clone(),
                    message: format!("field name `{}` is reserved", field.name),
                });
            }
            if kind.fields[..i].iter().any(|f| f.name == field.name) {
                return Err(TapeError::InvalidSchema {
                    kind: kind.kind.clone(),
                    message: format!("field `{}` declared twice", field.name),
                });
            }
        }
        self.kinds.insert(kind.kind.clone(), kind);
        Ok(())
    }

    /// Registers `kind` unless an identical definition is already present.
    pub fn ensure(&mut self, kind: StepKind) -> Result<(), TapeError> {
        match self.kinds.get(&kind.kind) {
            Some(existing) if *existing == kind => Ok(()),
            _ => self.register(kind),
        }
    }

    pub fn get(&self, kind: &str) -> Option<&StepKind> {
        self.kinds.get(kind)
    }

    pub fn contains(&self, kind: &str) -> bool {
        self.kinds.contains_key(kind)
    }

    pub fn kinds(&self) -> impl Iterator<Item = &StepKind> {
        self.kinds.values()
    }

    /// Builds a validated step of `kind` with a fresh id.
    pub fn step(&self, kind: &str, payload: Value) -> Result<Step, TapeError> {
        let def = self
            .get(kind)
            .ok_or_else(|| TapeError::UnknownKind(kind.to_string()))?;
        let payload = match payload {
            Value::Object(map) => map,
            Value::Null => Map::new(),
            other => {
                return Err(TapeError::Validation {
                    kind: kind.into(),
                    message: format!("payload must be an object, got {other}"),
                })
            }
        };
        def.schema().validate(kind, &payload)?;
        Ok(Step::raw(kind, def.category, payload))
    }

    pub fn validate(&self, step: &Step) -> Result<(), TapeError> {
        let def = self
            .get(&step.kind)
            .ok_or_else(|| TapeError::UnknownKind(step.kind.clone()))?;
        if def.category != step.category {
            return Err(TapeError::Validation {
                kind: step.kind.clone(),
                message: format!(
                    "category {} does not match registered category {}",
                    step.category, def.category
                ),
            });
        }
        def.schema().validate(&step.kind, &step.payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_present() {
        let registry = StepRegistry::default();
        for kind in BUILTIN_KINDS {
            assert!(registry.contains(kind), "{kind}");
        }
        assert_eq!(registry.get("call").unwrap().category, StepCategory::Thought);
        assert_eq!(registry.get("set_next_node").unwrap().category, StepCategory::Control);
        assert_eq!(registry.get("parse_failure").unwrap().category, StepCategory::Observation);
    }

    #[test]
    fn register_custom_action() {
        let mut registry = StepRegistry::default();
        registry
            .register(StepKind::new(
                "get_stock_ticker_action",
                StepCategory::Action,
                vec![FieldSpec::required("company_name", FieldType::String)],
            ))
            .unwrap();
        let def = registry.get("get_stock_ticker_action").unwrap();
        assert_eq!(def.category, StepCategory::Action);
    }

    #[test]
    fn builtin_collision_is_reserved() {
        let mut registry = StepRegistry::default();
        let err = registry
            .register(StepKind::new("call", StepCategory::Thought, vec![]))
            .unwrap_err();
        assert!(matches!(err, TapeError::ReservedKind(k) if k == "call"));
    }

    #[test]
    fn duplicate_kind_rejected() {
        let mut registry = StepRegistry::default();
        let kind = StepKind::new("note", StepCategory::Thought, vec![]);
        registry.register(kind.clone()).unwrap();
        assert!(matches!(registry.register(kind.clone()), Err(TapeError::DuplicateKind(_))));
        registry.ensure(kind).unwrap();
    }

    #[test]
    fn reserved_field_names_rejected() {
        let mut registry = StepRegistry::default();
        let err = registry
            .register(StepKind::new(
                "bad",
                StepCategory::Thought,
                vec![FieldSpec::required("metadata", FieldType::String)],
            ))
            .unwrap_err();
        assert!(matches!(err, TapeError::InvalidSchema { .. }));
    }

    #[test]
    fn missing_required_field_fails_validation() {
        let mut registry = StepRegistry::default();
        registry
            .register(StepKind::new(
                "get_stock_ticker_action",
                StepCategory::Action,
                vec![FieldSpec::required("company_name", FieldType::String)],
            ))
            .unwrap();
        let err = registry.step("get_stock_ticker_action", json!({})).unwrap_err();
        assert!(matches!(err, TapeError::Validation { .. }));
        let err = registry
            .step("get_stock_ticker_action", json!({"company_name": 3}))
            .unwrap_err();
        assert!(matches!(err, TapeError::Validation { .. }));
        let err = registry
            .step("get_stock_ticker_action", json!({"company_name": "x", "extra": 1}))
            .unwrap_err();
        assert!(matches!(err, TapeError::Validation { .. }));
    }

    #[test]
    fn set_next_node_rejects_negative_index() {
        let registry = StepRegistry::default();
        assert!(registry.step("set_next_node", json!({"next_node": -1})).is_err());
        assert!(registry.step("set_next_node", json!({"next_node": 2})).is_ok());
    }

    #[test]
    fn category_mismatch_fails() {
        let registry = StepRegistry::default();
        let mut step = registry.step("respond", json!({"content": "x"})).unwrap();
        step.category = StepCategory::Action;
        assert!(registry.validate(&step).is_err());
    }

    #[test]
    fn prompt_schema_has_kind_const() {
        let registry = StepRegistry::default();
        let schema = registry.get("call").unwrap().to_prompt_schema();
        assert_eq!(schema["properties"]["kind"]["const"], "call");
        assert_eq!(schema["required"][0], "kind");
    }
}
