//! Extraction of `<tool_call>{...}</tool_call>` blocks from model text.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backend::RawToolCall;
use crate::message::ToolCall;

pub const CALL_OPEN: &str = "<tool_call>";
pub const CALL_CLOSE: &str = "</tool_call>";

/// Malformed call syntax somewhere in a model turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("malformed tool call at byte {position}: {detail}")]
pub struct ParseFailure {
    pub position: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedTurn {
    Calls(Vec<ToolCall>),
    /// No call and non-empty text.
    FinalAnswer(String),
}

/// Parses every call in `text`. One malformed block fails the whole turn.
///
/// Calls without an `id` get `call_{turn}_{k}`.
pub fn parse_tool_calls(text: &str, turn: u32) -> Result<ParsedTurn, ParseFailure> {
    let mut calls = Vec::new();
    let mut prose = String::new();
    let mut cursor = 0;
    while let Some(rel) = text[cursor..].find(CALL_OPEN) {
        let open = cursor + rel;
        if let Some(stray) = text[cursor..open].find(CALL_CLOSE) {
            return Err(ParseFailure {
                position: cursor + stray,
                detail: "closing tag without opening tag".into(),
            });
        }
        prose.push_str(&text[cursor..open]);
        let body_start = open + CALL_OPEN.len();
        let close = text[body_start..].find(CALL_CLOSE).map(|r| body_start + r).ok_or_else(|| {
            ParseFailure { position: open, detail: "unterminated tool call".into() }
        })?;
        let body = &text[body_start..close];
        let k = calls.len();
        calls.push(parse_call_body(body, body_start, turn, k)?);
        cursor = close + CALL_CLOSE.len();
    }
    if let Some(stray) = text[cursor..].find(CALL_CLOSE) {
        return Err(ParseFailure {
            position: cursor + stray,
            detail: "closing tag without opening tag".into(),
        });
    }
    prose.push_str(&text[cursor..]);
    if !calls.is_empty() {
        return Ok(ParsedTurn::Calls(calls));
    }
    let answer = prose.trim();
    if answer.is_empty() {
        return Err(ParseFailure { position: 0, detail: "empty reply".into() });
    }
    Ok(ParsedTurn::FinalAnswer(answer.to_string()))
}

fn parse_call_body(body: &str, offset: usize, turn: u32, k: usize) -> Result<ToolCall, ParseFailure> {
    let value: Value = serde_json::from_str(body).map_err(|e| ParseFailure {
        position: offset + byte_offset(body, e.line(), e.column()),
        detail: format!("invalid JSON: {e}"),
    })?;
    let obj = value.as_object().ok_or_else(|| ParseFailure {
        position: offset,
        detail: "tool call must be a JSON object".into(),
    })?;
    let name = obj.get("name").and_then(Value::as_str).ok_or_else(|| ParseFailure {
        position: offset,
        detail: "tool call has no string `name`".into(),
    })?;
    let arguments = match obj.get("arguments") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(Value::String(s)) => parse_arguments(s).map_err(|detail| ParseFailure { position: offset, detail })?,
        Some(_) => {
            return Err(ParseFailure { position: offset, detail: "`arguments` must be an object".into() })
        }
    };
    let call_id = match obj.get("id").and_then(Value::as_str) {
        Some(id) if !id.is_empty() => id.to_string(),
        _ => fresh_call_id(turn, k),
    };
    Ok(ToolCall { call_id, tool_name: name.to_string(), arguments })
}

/// Parses a JSON-object argument string as sent by OpenAI-style endpoints.
pub fn parse_arguments(s: &str) -> Result<Map<String, Value>, String> {
    if s.trim().is_empty() {
        return Ok(Map::new());
    }
    match serde_json::from_str::<Value>(s) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err("`arguments` must encode a JSON object".into()),
        Err(e) => Err(format!("invalid JSON in arguments: {e}")),
    }
}

/// Converts structured calls, all-or-nothing like the text parser.
pub fn convert_raw_calls(raw: &[RawToolCall], turn: u32) -> Result<Vec<ToolCall>, ParseFailure> {
    raw.iter()
        .enumerate()
        .map(|(k, c)| {
            let arguments = parse_arguments(&c.arguments).map_err(|detail| ParseFailure {
                position: 0,
                detail: format!("call {k} (`{}`): {detail}", c.name),
            })?;
            Ok(ToolCall {
                call_id: c.id.clone().filter(|s| !s.is_empty()).unwrap_or_else(|| fresh_call_id(turn, k)),
                tool_name: c.name.clone(),
                arguments,
            })
        })
        .collect()
}

/// Text form of a call, as it would appear in model output.
pub fn render_call(call: &ToolCall) -> String {
    let body = serde_json::json!({"name": call.tool_name, "arguments": call.arguments});
    format!("{CALL_OPEN}{body}{CALL_CLOSE}")
}

pub fn fresh_call_id(turn: u32, k: usize) -> String {
    format!("call_{turn}_{k}")
}

fn byte_offset(s: &str, line: usize, column: usize) -> usize {
    let mut off = 0;
    for (i, l) in s.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (off + column.saturating_sub(1)).min(s.len());
        }
        off += l.len();
    }
    s.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_well_formed_call() {
        let text = r#"Let me compute. <tool_call>{"name": "calculator", "arguments": {"expression": "2+3"}}</tool_call>"#;
        let ParsedTurn::Calls(calls) = parse_tool_calls(text, 0).unwrap() else { panic!() };
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].tool_name, "calculator");
        assert_eq!(calls[0].arguments["expression"], "2+3");
        assert_eq!(calls[0].call_id, "call_0_0");
    }

    #[test]
    fn truncated_arguments_report_position() {
        let text = r#"<tool_call>{"name": "calculator", "arguments": {"expression": "2+</tool_call>"#;
        let err = parse_tool_calls(text, 0).unwrap_err();
        assert!(err.position >= CALL_OPEN.len());
        assert!(err.detail.contains("invalid JSON"));

        let unterminated = r#"<tool_call>{"name": "calculator""#;
        assert_eq!(parse_tool_calls(unterminated, 0).unwrap_err().position, 0);
    }

    #[test]
    fn second_malformed_fails_whole_turn() {
        let text = concat!(
            r#"<tool_call>{"name": "calculator", "arguments": {"expression": "1"}}</tool_call>"#,
            r#"<tool_call>{"name": calculator}</tool_call>"#
        );
        assert!(parse_tool_calls(text, 3).is_err());
    }

    #[test]
    fn plain_text_is_final_answer() {
        assert_eq!(parse_tool_calls("  42 \n", 0).unwrap(), ParsedTurn::FinalAnswer("42".into()));
        assert!(parse_tool_calls("   ", 0).is_err());
        assert!(parse_tool_calls("done </tool_call>", 0).is_err());
    }

    #[test]
    fn string_arguments_and_ids() {
        let text = r#"<tool_call>{"id": "abc", "name": "kv_store", "arguments": "{\"key\": \"a\"}"}</tool_call>"#;
        let ParsedTurn::Calls(calls) = parse_tool_calls(text, 0).unwrap() else { panic!() };
        assert_eq!(calls[0].call_id, "abc");
        assert_eq!(calls[0].arguments["key"], "a");
    }

    #[test]
    fn rendered_call_parses_back() {
        let call = ToolCall {
            call_id: "call_2_0".into(),
            tool_name: "calculator".into(),
            arguments: serde_json::json!({"expression": "6*7"}).as_object().unwrap().clone(),
        };
        let ParsedTurn::Calls(calls) = parse_tool_calls(&render_call(&call), 2).unwrap() else { panic!() };
        assert_eq!(calls, [call]);
    }

    #[test]
    fn raw_calls_all_or_nothing() {
        let ok = RawToolCall { id: Some("x".into()), name: "calculator".into(), arguments: "{\"expression\":\"1\"}".into() };
        let bad = RawToolCall { id: None, name: "calculator".into(), arguments: "{\"expr".into() };
        assert_eq!(convert_raw_calls(core::slice::from_ref(&ok), 0).unwrap()[0].call_id, "x");
        assert!(convert_raw_calls(&[ok, bad], 0).is_err());
    }
}
