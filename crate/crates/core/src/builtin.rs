//! Bundled demo tools (one per runtime class), the default instruction
//! builder and the exact-match verifier.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde_json::{json, Map, Value};

use crate::agent::TrajectoryState;
use crate::message::{Message, Provenance, Role};
use crate::registry::{InstructionBuilder, RegistryBuilder, RegistryError, TaskSpec, Verifier};
use crate::tool::{manifest, Runtime, RuntimeClass, ToolContext, ToolOutput, ToolSpec};

pub const CALCULATOR: &str = "calculator";
pub const KV_STORE: &str = "kv_store";
pub const SUMMARIZE_HISTORY: &str = "summarize_history";

pub fn calculator_spec() -> ToolSpec {
    ToolSpec::new(
        CALCULATOR,
        "Evaluate an arithmetic expression with + - * / and parentheses.",
        json!({
            "type": "object",
            "properties": {"expression": {"type": "string"}},
            "required": ["expression"]
        }),
        RuntimeClass::Stateless,
    )
}

pub fn kv_store_spec() -> ToolSpec {
    ToolSpec::new(
        KV_STORE,
        "Read or write a key in the environment store. With `value` the key is written, without it the key is read.",
        json!({
            "type": "object",
            "properties": {"key": {"type": "string"}, "value": {"type": "string"}},
            "required": ["key"]
        }),
        RuntimeClass::EnvModifying,
    )
}

pub fn summarize_history_spec() -> ToolSpec {
    ToolSpec::new(
        SUMMARIZE_HISTORY,
        "Replace the conversation so far with a short summary to free context.",
        json!({
            "type": "object",
            "properties": {"note": {"type": "string"}}
        }),
        RuntimeClass::AgentStateModifying,
    )
}

pub(crate) fn register_all(b: &mut RegistryBuilder) -> Result<(), RegistryError> {
    b.register_tool(calculator_spec(), calculator)?;
    b.register_tool(kv_store_spec(), kv_store)?;
    b.register_tool(summarize_history_spec(), summarize_history)?;
    b.register_builder("default", DefaultBuilder)?;
    b.register_verifier("exact_match", ExactMatch)?;
    Ok(())
}

fn calculator(args: &Map<String, Value>, _cx: &mut ToolContext<'_>) -> Result<ToolOutput, String> {
    let expr = args.get("expression").and_then(Value::as_str).unwrap_or_default();
    let v = eval_arith(expr)?;
    Ok(ToolOutput::text(format_number(v)))
}

fn kv_store(args: &Map<String, Value>, cx: &mut ToolContext<'_>) -> Result<ToolOutput, String> {
    let key = args.get("key").and_then(Value::as_str).unwrap_or_default();
    match args.get("value").and_then(Value::as_str) {
        Some(value) => {
            let rt = cx.runtime_mut().ok_or("runtime is read-only")?;
            rt.store.insert(key.to_string(), value.to_string());
            Ok(ToolOutput::text(format!("stored {key}")))
        }
        None => cx
            .runtime()
            .store
            .get(key)
            .map(|v| ToolOutput::text(v.clone()))
            .ok_or_else(|| format!("key `{key}` not found")),
    }
}

fn summarize_history(args: &Map<String, Value>, cx: &mut ToolContext<'_>) -> Result<ToolOutput, String> {
    let history = cx.history();
    let mut kept: Vec<Message> = Vec::new();
    if let Some(sys) = history.iter().find(|m| m.role == Role::System) {
        kept.push(sys.clone());
    }
    if let Some(task) = history.iter().find(|m| m.role == Role::User) {
        kept.push(task.clone());
    }
    let model_turns = history.iter().filter(|m| m.provenance == Provenance::Model).count();
    let last_tool = history
        .iter()
        .rev()
        .find(|m| m.role == Role::Tool)
        .map(|m| m.content.as_str())
        .unwrap_or("none");
    let mut summary = format!(
        "Summary of {} earlier messages ({model_turns} model turns). Last tool output: {last_tool}",
        history.len()
    );
    if let Some(note) = args.get("note").and_then(Value::as_str) {
        summary.push_str(". Note: ");
        summary.push_str(note);
    }
    kept.push(Message::new(Role::User, summary, Provenance::Injected));
    Ok(ToolOutput {
        content: format!("history summarized ({} messages)", history.len()),
        state_patch: Some(kept),
    })
}

/// System prompt carrying the tool manifest, then the task prompt.
pub struct DefaultBuilder;

impl InstructionBuilder for DefaultBuilder {
    fn build(&self, task: &TaskSpec, toolset: &[&ToolSpec]) -> Vec<Message> {
        let tools = serde_json::to_string(&manifest(toolset)).unwrap_or_default();
        let system = format!(
            "You are an agent that solves tasks step by step. To call a tool, emit <tool_call>{{\"name\": ..., \"arguments\": {{...}}}}</tool_call>. When done, reply with the final answer and no tool call.\nTools: {tools}"
        );
        let prompt = match task.payload.get("prompt").or_else(|| task.payload.get("question")) {
            Some(Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => task.payload.to_string(),
        };
        alloc::vec![Message::system(system), Message::user(prompt)]
    }
}

/// 1.0 when the final answer equals `payload.answer` after trimming.
pub struct ExactMatch;

impl Verifier for ExactMatch {
    fn verify(&self, task: &TaskSpec, state: &TrajectoryState, _runtime: &Runtime) -> Result<f64, String> {
        let gold = match task.payload.get("answer") {
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => return Err(format!("task `{}` has no gold answer", task.task_id)),
        };
        let hit = state.final_answer().is_some_and(|a| a.trim() == gold.trim());
        Ok(if hit { 1.0 } else { 0.0 })
    }
}

/// Renders integral values without a fractional part.
pub fn format_number(v: f64) -> String {
    if v == (v as i64) as f64 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Recursive-descent evaluator for `+ - * /`, unary minus and parentheses.
pub fn eval_arith(src: &str) -> Result<f64, String> {
    let mut p = Arith { s: src.as_bytes(), pos: 0 };
    let v = p.expr()?;
    p.skip_ws();
    if p.pos != p.s.len() {
        return Err(format!("unexpected character at position {}", p.pos));
    }
    if !v.is_finite() {
        return Err("result is not finite".into());
    }
    Ok(v)
}

struct Arith<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Arith<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<f64, String> {
        let mut v = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let r = self.term()?;
            v = if op == b'+' { v + r } else { v - r };
        }
        Ok(v)
    }

    fn term(&mut self) -> Result<f64, String> {
        let mut v = self.factor()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let r = self.factor()?;
            if op == b'/' {
                if r == 0.0 {
                    return Err("division by zero".into());
                }
                v /= r;
            } else {
                v *= r;
            }
        }
        Ok(v)
    }

    fn factor(&mut self) -> Result<f64, String> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(-self.factor()?)
            }
            Some(b'(') => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(format!("expected `)` at position {}", self.pos));
                }
                self.pos += 1;
                Ok(v)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.s.len() && (self.s[self.pos].is_ascii_digit() || self.s[self.pos] == b'.') {
                    self.pos += 1;
                }
                let lit = core::str::from_utf8(&self.s[start..self.pos]).map_err(|_| "bad number")?;
                lit.parse::<f64>().map_err(|_| format!("bad number `{lit}`"))
            }
            Some(_) => Err(format!("unexpected character at position {}", self.pos)),
            None => Err("unexpected end of expression".into()),
        }
    }
}
