//! Tool definitions, argument validation and the runtime tools act on.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::time::Duration;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::message::Message;

/// Timeout applied when a spec does not set one.
pub const DEFAULT_TOOL_TIMEOUT: Duration = Duration::from_secs(30);

/// Content used for a successful call that produced no text.
pub const EMPTY_OUTPUT: &str = "[no output]";

/// Effect category of a tool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeClass {
    /// Pure functions of their arguments.
    Stateless,
    /// May mutate the runtime, never the agent context.
    EnvModifying,
    /// May replace the agent's context through a state patch.
    AgentStateModifying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Value,
    pub runtime_class: RuntimeClass,
    #[serde(default = "default_timeout", with = "duration_secs")]
    pub timeout: Duration,
}

fn default_timeout() -> Duration {
    DEFAULT_TOOL_TIMEOUT
}

mod duration_secs {
    use core::time::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct SchemaError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parameter `{param}`: {reason}")]
pub struct ArgumentError {
    pub param: String,
    pub reason: String,
}

impl ToolSpec {
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        parameters: Value,
        runtime_class: RuntimeClass,
    ) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            parameters,
            runtime_class,
            timeout: DEFAULT_TOOL_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Checks the three schema facets tools use: top-level `type: object`,
    /// a `properties` object of per-parameter schemas, and a `required` list
    /// naming declared properties.
    pub fn validate_schema(&self) -> Result<(), SchemaError> {
        if self.name.is_empty() {
            return Err(SchemaError("tool name is empty".into()));
        }
        let obj = self
            .parameters
            .as_object()
            .ok_or_else(|| SchemaError("parameters must be a JSON object".into()))?;
        if obj.get("type").and_then(Value::as_str) != Some("object") {
            return Err(SchemaError("parameters must declare \"type\": \"object\"".into()));
        }
        let props = match obj.get("properties") {
            None => None,
            Some(Value::Object(p)) => Some(p),
            Some(_) => return Err(SchemaError("\"properties\" must be an object".into())),
        };
        if let Some(props) = props {
            for (k, v) in props {
                if !v.is_object() {
                    return Err(SchemaError(format!("property `{k}` must map to a schema object")));
                }
            }
        }
        match obj.get("required") {
            None => {}
            Some(Value::Array(req)) => {
                for r in req {
                    let name = r
                        .as_str()
                        .ok_or_else(|| SchemaError("\"required\" entries must be strings".into()))?;
                    if !props.is_some_and(|p| p.contains_key(name)) {
                        return Err(SchemaError(format!(
                            "required parameter `{name}` is not declared in properties"
                        )));
                    }
                }
            }
            Some(_) => return Err(SchemaError("\"required\" must be an array".into())),
        }
        Ok(())
    }

    /// Validates call arguments against `parameters`: required keys present,
    /// no undeclared keys, and primitive `type` of each supplied property.
    pub fn validate_arguments(&self, args: &Map<String, Value>) -> Result<(), ArgumentError> {
        let props = self.parameters.get("properties").and_then(Value::as_object);
        if let Some(req) = self.parameters.get("required").and_then(Value::as_array) {
            for name in req.iter().filter_map(Value::as_str) {
                if !args.contains_key(name) {
                    return Err(ArgumentError {
                        param: name.to_string(),
                        reason: "required parameter is missing".into(),
                    });
                }
            }
        }
        for (key, value) in args {
            let Some(schema) = props.and_then(|p| p.get(key)) else {
                return Err(ArgumentError {
                    param: key.clone(),
                    reason: "unknown parameter".into(),
                });
            };
            if let Some(ty) = schema.get("type").and_then(Value::as_str) {
                if !type_matches(ty, value) {
                    return Err(ArgumentError {
                        param: key.clone(),
                        reason: format!("expected {ty}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// One entry of an OpenAI `tools` array.
    pub fn manifest_entry(&self) -> Value {
        json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": self.parameters,
            }
        })
    }
}

fn type_matches(ty: &str, v: &Value) -> bool {
    match ty {
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_i64() || v.is_u64(),
        "boolean" => v.is_boolean(),
        "object" => v.is_object(),
        "array" => v.is_array(),
        "null" => v.is_null(),
        _ => true,
    }
}

/// OpenAI-shaped tools array for a toolset.
pub fn manifest(specs: &[&ToolSpec]) -> Value {
    Value::Array(specs.iter().map(|s| s.manifest_entry()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    RecoverableError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub call_id: String,
    pub status: ToolStatus,
    pub content: String,
    /// Replacement agent context; only ever set by agent-state-modifying tools.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_patch: Option<Vec<Message>>,
}

/// What a tool body returns on success.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToolOutput {
    pub content: String,
    pub state_patch: Option<Vec<Message>>,
}

impl ToolOutput {
    pub fn text(content: impl Into<String>) -> Self {
        Self { content: content.into(), state_patch: None }
    }
}

/// Environment state a trajectory's tools act on.
///
/// A flat string store: enough to model file edits and other side effects
/// for the bundled tools and tests.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Runtime {
    pub store: BTreeMap<String, String>,
}

impl Runtime {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runtime seeded from a task payload's `initial_state` object.
    pub fn from_payload(payload: &Value) -> Self {
        let mut rt = Self::new();
        if let Some(init) = payload.get("initial_state").and_then(Value::as_object) {
            for (k, v) in init {
                let v = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                rt.store.insert(k.clone(), v);
            }
        }
        rt
    }
}

enum RuntimeAccess<'a> {
    Shared(&'a Runtime),
    Exclusive(&'a mut Runtime),
}

/// What a tool may see and touch during one call.
pub struct ToolContext<'a> {
    runtime: RuntimeAccess<'a>,
    history: &'a [Message],
}

impl<'a> ToolContext<'a> {
    pub(crate) fn new(class: RuntimeClass, runtime: &'a mut Runtime, history: &'a [Message]) -> Self {
        let runtime = match class {
            RuntimeClass::EnvModifying => RuntimeAccess::Exclusive(runtime),
            _ => RuntimeAccess::Shared(runtime),
        };
        Self { runtime, history }
    }

    pub fn runtime(&self) -> &Runtime {
        match &self.runtime {
            RuntimeAccess::Shared(r) => r,
            RuntimeAccess::Exclusive(r) => r,
        }
    }

    /// Mutable runtime; `None` unless the tool is environment-modifying.
    pub fn runtime_mut(&mut self) -> Option<&mut Runtime> {
        match &mut self.runtime {
            RuntimeAccess::Shared(_) => None,
            RuntimeAccess::Exclusive(r) => Some(r),
        }
    }

    /// The agent's current message history.
    pub fn history(&self) -> &[Message] {
        self.history
    }
}

/// Behaviour behind a registered [`ToolSpec`].
///
/// An `Err` is reported back to the agent as a recoverable tool error.
pub trait Tool: Send + Sync {
    fn call(&self, args: &Map<String, Value>, cx: &mut ToolContext<'_>) -> Result<ToolOutput, String>;
}

impl<F> Tool for F
where
    F: Fn(&Map<String, Value>, &mut ToolContext<'_>) -> Result<ToolOutput, String> + Send + Sync,
{
    fn call(&self, args: &Map<String, Value>, cx: &mut ToolContext<'_>) -> Result<ToolOutput, String> {
        self(args, cx)
    }
}

pub type BoxedTool = Box<dyn Tool>;
