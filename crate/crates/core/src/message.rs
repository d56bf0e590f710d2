//! Conversation messages and the chat template used to turn them into tokens.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

/// Where a message came from. Only `Model` content is ever trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Model,
    Tool,
    Injected,
}

/// A function call requested by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: String,
    pub tool_name: String,
    pub arguments: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
    pub provenance: Provenance,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
            provenance,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content, Provenance::Injected)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content, Provenance::Injected)
    }

    pub fn tool_result(call_id: &str, content: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            tool_call_id: Some(String::from(call_id)),
            ..Self::new(Role::Tool, content, provenance)
        }
    }
}

/// Literal prefix that opens a generation turn.
pub const GENERATION_PROMPT: &str = "<|assistant|>\n";
/// Literal that closes a model turn once the model has stopped.
pub const TURN_CLOSE: &str = "\n<|end|>\n";

/// Text of a non-model message as it appears in the token context.
pub fn render(message: &Message) -> String {
    format!("<|{}|>\n{}{}", message.role.as_str(), message.content, TURN_CLOSE)
}

/// Every template literal, for seeding a tokenizer corpus.
pub fn template_literals() -> Vec<String> {
    let mut out = Vec::new();
    for role in [Role::System, Role::User, Role::Assistant, Role::Tool] {
        out.push(format!("<|{}|>\n", role.as_str()));
    }
    out.push(String::from(TURN_CLOSE));
    out
}

/// Tokens of a whole context rebuilt from scratch.
///
/// Model messages are re-encoded from their text here; this is only used
/// when a context is replaced wholesale, which is exactly the case where the
/// token prefix is not preserved anyway.
pub fn render_context(tokenizer: &Tokenizer, messages: &[Message]) -> Vec<TokenId> {
    let mut ids = Vec::new();
    for m in messages {
        if m.provenance == Provenance::Model {
            tokenizer.tokenize_into(GENERATION_PROMPT, &mut ids);
            tokenizer.tokenize_into(&m.content, &mut ids);
            tokenizer.tokenize_into(TURN_CLOSE, &mut ids);
        } else {
            tokenizer.tokenize_into(&render(m), &mut ids);
        }
    }
    ids
}
