//! Fault taxonomy: terminal conditions end the episode, recoverable ones are
//! answered with corrective feedback.

use alloc::format;
use alloc::string::String;
use serde::{Deserialize, Serialize};

use super::parse::ParseFailure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationKind {
    TaskComplete,
    ContextExceeded,
    MaxStepsReached,
    UnrecoverableFault,
}

impl TerminationKind {
    /// Ended by a step or context budget rather than by the agent.
    pub fn is_constraint(self) -> bool {
        matches!(self, Self::ContextExceeded | Self::MaxStepsReached)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TaskComplete => "task_complete",
            Self::ContextExceeded => "context_exceeded",
            Self::MaxStepsReached => "max_steps_reached",
            Self::UnrecoverableFault => "unrecoverable_fault",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminationReason {
    pub kind: TerminationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoverableKind {
    ParseFailure,
    InvalidParams,
    ToolTimeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoverableCondition {
    pub kind: RecoverableKind,
    /// Corrective text appended to the conversation. Never empty.
    pub feedback: String,
}

/// Anything that can go wrong inside the loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    ContextExceeded { needed: usize, limit: u32 },
    MaxStepsReached { limit: u32 },
    ParseFailure(ParseFailure),
    InvalidParams { tool: String, param: String, reason: String },
    /// The model called a function outside its toolset.
    UnavailableFunction { name: String, available: String },
    ToolTimeout { tool: String, detail: String },
    /// A toolset entry the registry cannot resolve.
    UnknownTool(String),
    Internal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Classification {
    Terminal(TerminationReason),
    Recoverable(RecoverableCondition),
}

/// Total mapping from faults to their handling.
pub fn classify_failure(fault: &Fault) -> Classification {
    use Classification::*;
    let terminal = |kind, detail| Terminal(TerminationReason { kind, detail });
    let recoverable = |kind, feedback| Recoverable(RecoverableCondition { kind, feedback });
    match fault {
        Fault::ContextExceeded { needed, limit } => terminal(
            TerminationKind::ContextExceeded,
            format!("next request needs {needed} tokens, context window is {limit}"),
        ),
        Fault::MaxStepsReached { limit } => {
            terminal(TerminationKind::MaxStepsReached, format!("reached the limit of {limit} steps"))
        }
        Fault::ParseFailure(p) => recoverable(
            RecoverableKind::ParseFailure,
            format!(
                "Your last reply could not be parsed ({}). Emit each call as <tool_call>{{\"name\": ..., \"arguments\": {{...}}}}</tool_call>, or reply with the final answer only.",
                p
            ),
        ),
        Fault::InvalidParams { tool, param, reason } => recoverable(
            RecoverableKind::InvalidParams,
            format!("Invalid parameter `{param}` for tool `{tool}`: {reason}. Fix the arguments and try again."),
        ),
        Fault::UnavailableFunction { name, available } => recoverable(
            RecoverableKind::InvalidParams,
            format!("Invalid parameter `name`: function `{name}` is not available. Available functions: {available}."),
        ),
        Fault::ToolTimeout { tool, detail } => recoverable(
            RecoverableKind::ToolTimeout,
            format!("Tool `{tool}` did not finish in time ({detail}). Try a cheaper action."),
        ),
        Fault::UnknownTool(name) => terminal(
            TerminationKind::UnrecoverableFault,
            format!("tool `{name}` is not registered"),
        ),
        Fault::Internal(detail) => terminal(TerminationKind::UnrecoverableFault, detail.clone()),
    }
}
