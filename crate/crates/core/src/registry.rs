//! Name-keyed registry of tools, instruction builders and verifiers.
//!
//! Registration happens on a [`RegistryBuilder`]; [`RegistryBuilder::freeze`]
//! produces an immutable [`Registry`] that trajectories share.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::time::Duration;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::TrajectoryState;
use crate::clock::Clock;
use crate::message::{Message, ToolCall};
use crate::tool::{
    ArgumentError, BoxedTool, Runtime, RuntimeClass, Tool, ToolContext, ToolResult, ToolSpec,
    ToolStatus, EMPTY_OUTPUT,
};

/// Default budgets used when a task does not set its own.
pub const DEFAULT_MAX_STEPS: u32 = 50;
pub const DEFAULT_MAX_CONTEXT_TOKENS: u32 = 32_768;

/// One dataset row bound to its tools, instruction builder and verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(default = "default_builder")]
    pub instruction_builder: String,
    #[serde(default)]
    pub toolset: Vec<String>,
    #[serde(default = "default_verifier")]
    pub verifier: String,
    #[serde(default)]
    pub payload: Value,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    #[serde(default = "default_max_context")]
    pub max_context_tokens: u32,
}

fn default_builder() -> String {
    "default".into()
}
fn default_verifier() -> String {
    "exact_match".into()
}
fn default_max_steps() -> u32 {
    DEFAULT_MAX_STEPS
}
fn default_max_context() -> u32 {
    DEFAULT_MAX_CONTEXT_TOKENS
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, toolset: &[&str], payload: Value) -> Self {
        Self {
            task_id: task_id.into(),
            instruction_builder: default_builder(),
            toolset: toolset.iter().map(|s| s.to_string()).collect(),
            verifier: default_verifier(),
            payload,
            max_steps: DEFAULT_MAX_STEPS,
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
        }
    }
}

/// Produces the opening messages of a trajectory.
pub trait InstructionBuilder: Send + Sync {
    fn build(&self, task: &TaskSpec, toolset: &[&ToolSpec]) -> Vec<Message>;
}

/// Scores a finished trajectory. `Err` marks a verifier failure.
pub trait Verifier: Send + Sync {
    fn verify(&self, task: &TaskSpec, state: &TrajectoryState, runtime: &Runtime) -> Result<f64, String>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("`{0}` is already registered")]
    DuplicateName(String),
    #[error("invalid parameter schema for `{name}`: {reason}")]
    InvalidSchema { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InvokeError {
    #[error("no tool named `{0}` is registered")]
    UnknownTool(String),
    #[error("invalid arguments for `{tool}`: {source}")]
    InvalidArguments { tool: String, source: ArgumentError },
    #[error("tool `{0}` returned a state patch but is not agent-state-modifying")]
    IllegalStatePatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaskError {
    #[error("task `{task}`: toolset entry `{tool}` is not registered")]
    UnknownTool { task: String, tool: String },
    #[error("task `{task}`: no instruction builder named `{name}`")]
    UnknownBuilder { task: String, name: String },
    #[error("task `{task}`: no verifier named `{name}`")]
    UnknownVerifier { task: String, name: String },
    #[error("task `{task}`: {what} must be at least 1")]
    InvalidLimit { task: String, what: &'static str },
}

/// Per-call knobs for [`Registry::invoke_tool`].
#[derive(Clone, Copy)]
pub struct InvokeOptions<'a> {
    pub clock: &'a dyn Clock,
    /// Modelled execution time. When set, the deadline is judged against it
    /// instead of the clock.
    pub simulated_latency: Option<Duration>,
}

/// Reward plus failure flag from [`Registry::verify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub reward: f64,
    pub failure: Option<String>,
}

struct ToolEntry {
    spec: ToolSpec,
    behavior: BoxedTool,
}

#[derive(Default)]
pub struct RegistryBuilder {
    tools: BTreeMap<String, ToolEntry>,
    builders: BTreeMap<String, Box<dyn InstructionBuilder>>,
    verifiers: BTreeMap<String, Box<dyn Verifier>>,
}

impl RegistryBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry pre-loaded with the bundled tools, builder and verifier.
    pub fn with_builtins() -> Self {
        let mut b = Self::new();
        crate::builtin::register_all(&mut b).expect("builtin names are unique");
        b
    }

    pub fn register_tool(&mut self, spec: ToolSpec, behavior: impl Tool + 'static) -> Result<(), RegistryError> {
        if self.tools.contains_key(&spec.name) {
            return Err(RegistryError::DuplicateName(spec.name));
        }
        spec.validate_schema().map_err(|e| RegistryError::InvalidSchema {
            name: spec.name.clone(),
            reason: e.0,
        })?;
        self.tools
            .insert(spec.name.clone(), ToolEntry { spec, behavior: Box::new(behavior) });
        Ok(())
    }

    pub fn register_builder(
        &mut self,
        name: &str,
        builder: impl InstructionBuilder + 'static,
    ) -> Result<(), RegistryError> {
        if self.builders.contains_key(name) {
            return Err(RegistryError::DuplicateName(name.into()));
        }
        self.builders.insert(name.into(), Box::new(builder));
        Ok(())
    }

    pub fn register_verifier(&mut self, name: &str, verifier: impl Verifier + 'static) -> Result<(), RegistryError> {
        if self.verifiers.contains_key(name) {
            return Err(RegistryError::DuplicateName(name.into()));
        }
        self.verifiers.insert(name.into(), Box::new(verifier));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn freeze(self) -> Registry {
        Registry {
            tools: self.tools,
            builders: self.builders,
            verifiers: self.verifiers,
        }
    }
}

/// Frozen registry. Lookups are pure; nothing here mutates after freezing.
pub struct Registry {
    tools: BTreeMap<String, ToolEntry>,
    builders: BTreeMap<String, Box<dyn InstructionBuilder>>,
    verifiers: BTreeMap<String, Box<dyn Verifier>>,
}

impl Registry {
    pub fn tool(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name).map(|e| &e.spec)
    }

    pub fn tool_names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Checks that everything a task names resolves here.
    pub fn validate_task(&self, task: &TaskSpec) -> Result<(), TaskError> {
        if task.max_steps < 1 {
            return Err(TaskError::InvalidLimit { task: task.task_id.clone(), what: "max_steps" });
        }
        if task.max_context_tokens < 1 {
            return Err(TaskError::InvalidLimit {
                task: task.task_id.clone(),
                what: "max_context_tokens",
            });
        }
        if let Some(missing) = task.toolset.iter().find(|t| !self.tools.contains_key(t.as_str())) {
            return Err(TaskError::UnknownTool { task: task.task_id.clone(), tool: missing.clone() });
        }
        if !self.builders.contains_key(&task.instruction_builder) {
            return Err(TaskError::UnknownBuilder {
                task: task.task_id.clone(),
                name: task.instruction_builder.clone(),
            });
        }
        if !self.verifiers.contains_key(&task.verifier) {
            return Err(TaskError::UnknownVerifier {
                task: task.task_id.clone(),
                name: task.verifier.clone(),
            });
        }
        Ok(())
    }

    /// Specs of a task's toolset, in toolset order. Unknown names are skipped.
    pub fn toolset(&self, task: &TaskSpec) -> Vec<&ToolSpec> {
        task.toolset.iter().filter_map(|n| self.tool(n)).collect()
    }

    pub fn build_instruction(&self, task: &TaskSpec) -> Result<Vec<Message>, TaskError> {
        let builder = self
            .builders
            .get(&task.instruction_builder)
            .ok_or_else(|| TaskError::UnknownBuilder {
                task: task.task_id.clone(),
                name: task.instruction_builder.clone(),
            })?;
        Ok(builder.build(task, &self.toolset(task)))
    }

    pub fn invoke_tool(
        &self,
        call: &ToolCall,
        runtime: &mut Runtime,
        history: &[Message],
        opts: InvokeOptions<'_>,
    ) -> Result<ToolResult, InvokeError> {
        let entry = self
            .tools
            .get(&call.tool_name)
            .ok_or_else(|| InvokeError::UnknownTool(call.tool_name.clone()))?;
        let spec = &entry.spec;
        spec.validate_arguments(&call.arguments)
            .map_err(|source| InvokeError::InvalidArguments { tool: spec.name.clone(), source })?;

        if let Some(lat) = opts.simulated_latency {
            if lat > spec.timeout {
                return Ok(timeout_result(call, spec));
            }
        }
        let started = opts.clock.now();
        let outcome = {
            let mut cx = ToolContext::new(spec.runtime_class, runtime, history);
            entry.behavior.call(&call.arguments, &mut cx)
        };
        if opts.simulated_latency.is_none() && opts.clock.now().saturating_sub(started) > spec.timeout {
            return Ok(timeout_result(call, spec));
        }
        match outcome {
            Ok(out) => {
                if out.state_patch.is_some() && spec.runtime_class != RuntimeClass::AgentStateModifying {
                    return Err(InvokeError::IllegalStatePatch(spec.name.clone()));
                }
                let content = if out.content.is_empty() { EMPTY_OUTPUT.into() } else { out.content };
                Ok(ToolResult {
                    call_id: call.call_id.clone(),
                    status: ToolStatus::Ok,
                    content,
                    state_patch: out.state_patch,
                })
            }
            Err(msg) => Ok(ToolResult {
                call_id: call.call_id.clone(),
                status: ToolStatus::RecoverableError,
                content: format!("error: {msg}"),
                state_patch: None,
            }),
        }
    }

    /// Runs the task's verifier. Failures, overruns and non-finite scores all
    /// become reward 0 with `failure` set; they never propagate.
    pub fn verify(
        &self,
        task: &TaskSpec,
        state: &TrajectoryState,
        runtime: &Runtime,
        clock: &dyn Clock,
        deadline: Duration,
    ) -> VerifyOutcome {
        let Some(verifier) = self.verifiers.get(&task.verifier) else {
            return VerifyOutcome {
                reward: 0.0,
                failure: Some(format!("no verifier named `{}`", task.verifier)),
            };
        };
        let started = clock.now();
        let result = verifier.verify(task, state, runtime);
        let elapsed = clock.now().saturating_sub(started);
        let failure = match result {
            _ if elapsed > deadline => Some(format!(
                "verifier exceeded its {:.3}s deadline ({:.3}s)",
                deadline.as_secs_f64(),
                elapsed.as_secs_f64()
            )),
            Ok(r) if !r.is_finite() => Some(format!("verifier returned non-finite reward {r}")),
            Ok(r) => return VerifyOutcome { reward: r, failure: None },
            Err(e) => Some(e),
        };
        VerifyOutcome { reward: 0.0, failure }
    }
}

fn timeout_result(call: &ToolCall, spec: &ToolSpec) -> ToolResult {
    ToolResult {
        call_id: call.call_id.clone(),
        status: ToolStatus::Timeout,
        content: format!(
            "tool `{}` timed out after {:.1}s",
            spec.name,
            spec.timeout.as_secs_f64()
        ),
        state_patch: None,
    }
}
