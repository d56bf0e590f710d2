//! OpenAI-compatible chat-completions backend.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rollout_core::agent::{convert_raw_calls, render_call};
use rollout_core::backend::{
    BackendError, FinishReason, GenerationBackend, GenerationRequest, GenerationResult, RawToolCall,
};
use rollout_core::message::{Message, Role};
use rollout_core::tool::manifest;
use rollout_core::Tokenizer;
use serde_json::{json, Map, Value};

use crate::config::HttpBackendConfig;

/// Sleeps between retries; tests swap in a recorder.
pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub const FIRST_BACKOFF: Duration = Duration::from_secs(1);

#[derive(Debug, thiserror::Error)]
pub enum HttpSetupError {
    #[error("auth env var `{0}` is not set")]
    MissingAuth(String),
}

struct Semaphore {
    free: Mutex<u32>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    url: String,
    model: String,
    token: Option<String>,
    max_retries: u32,
    request_logprobs: bool,
    agent: ureq::Agent,
    tokenizer: Arc<Tokenizer>,
    sleeper: Sleeper,
    permits: Semaphore,
}

/// `endpoint` with `/v1/chat/completions` appended as needed.
pub fn completions_url(endpoint: &str) -> String {
    let e = endpoint.trim_end_matches('/');
    if e.ends_with("/chat/completions") {
        e.to_string()
    } else if e.ends_with("/v1") {
        format!("{e}/chat/completions")
    } else {
        format!("{e}/v1/chat/completions")
    }
}

impl HttpBackend {
    pub fn new(cfg: &HttpBackendConfig, tokenizer: Arc<Tokenizer>) -> Result<Self, HttpSetupError> {
        let token = match &cfg.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| HttpSetupError::MissingAuth(var.clone()))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            url: completions_url(&cfg.endpoint),
            model: cfg.model.clone(),
            token,
            max_retries: cfg.max_retries,
            request_logprobs: cfg.request_logprobs,
            agent,
            tokenizer,
            sleeper: Arc::new(std::thread::sleep),
            permits: Semaphore { free: Mutex::new(cfg.connection_cap.max(1)), cv: Condvar::new() },
        })
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// The JSON body sent for `req`.
    pub fn request_body(&self, req: &GenerationRequest<'_>) -> Value {
        let mut body = Map::new();
        body.insert("model".into(), Value::from(self.model.clone()));
        body.insert("messages".into(), Value::Array(req.messages.iter().map(wire_message).collect()));
        if !req.tools.is_empty() {
            body.insert("tools".into(), manifest(req.tools));
        }
        body.insert("temperature".into(), Value::from(req.params.temperature));
        body.insert("max_tokens".into(), Value::from(req.params.max_new_tokens));
        if req.params.seed != 0 {
            body.insert("seed".into(), Value::from(req.params.seed));
        }
        if self.request_logprobs {
            body.insert("logprobs".into(), Value::Bool(true));
        }
        Value::Object(body)
    }

    fn post(&self, body: &str) -> Result<String, BackendError> {
        let _permit = self.permits.acquire();
        let mut wait = FIRST_BACKOFF;
        let mut attempt = 0;
        loop {
            let err = match self.post_once(body) {
                Ok(text) => return Ok(text),
                Err(e) => e,
            };
            if attempt == self.max_retries {
                return Err(BackendError::Unavailable(format!("{err} (after {attempt} retries)")));
            }
            (self.sleeper)(wait);
            wait *= 2;
            attempt += 1;
        }
    }

    fn post_once(&self, body: &str) -> Result<String, String> {
        let mut r = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            r = r.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = r.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(format!("HTTP {status}"));
        }
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }

    /// Maps a response body to a result, tokenizing with the engine
    /// tokenizer.
    pub fn parse_response(&self, body: &str, max_new_tokens: u32) -> Result<GenerationResult, BackendError> {
        let v: Value = serde_json::from_str(body).map_err(|e| BackendError::WireFormat(e.to_string()))?;
        let choice = v
            .get("choices")
            .and_then(Value::as_array)
            .and_then(|c| c.first())
            .ok_or_else(|| BackendError::WireFormat("missing choices[0]".into()))?;
        let msg = choice
            .get("message")
            .and_then(Value::as_object)
            .ok_or_else(|| BackendError::WireFormat("missing choices[0].message".into()))?;
        let content = match msg.get("content") {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(BackendError::WireFormat("message.content is not a string".into())),
        };
        let calls = match msg.get("tool_calls") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(a)) => a.iter().map(raw_call).collect::<Result<Vec<_>, _>>()?,
            Some(_) => return Err(BackendError::WireFormat("message.tool_calls is not an array".into())),
        };
        let mut finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };

        let mut text = content.clone();
        if let Ok(parsed) = convert_raw_calls(&calls, 0) {
            for c in &parsed {
                text.push_str(&render_call(c));
            }
        }
        let mut output_ids = self.tokenizer.tokenize(&text);
        if output_ids.len() > max_new_tokens as usize {
            output_ids.truncate(max_new_tokens as usize);
            finish_reason = FinishReason::Length;
        }
        let logprobs = choice
            .get("logprobs")
            .and_then(|l| l.get("content"))
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|t| t.get("logprob").and_then(Value::as_f64)).collect::<Vec<_>>())
            // per-token logprobs only line up when the tokenizations agree
            .filter(|lp| lp.len() == output_ids.len());
        Ok(GenerationResult {
            output_ids,
            logprobs,
            finish_reason,
            text: Some(content),
            tool_calls: Some(calls),
            tokens_approximate: true,
        })
    }
}

fn raw_call(v: &Value) -> Result<RawToolCall, BackendError> {
    let f = v.get("function").ok_or_else(|| BackendError::WireFormat("tool_call without function".into()))?;
    let name = f
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::WireFormat("tool_call without function.name".into()))?;
    let arguments = match f.get("arguments") {
        Some(Value::String(s)) => s.clone(),
        None | Some(Value::Null) => "{}".into(),
        // some servers send an object instead of a JSON string
        Some(other) => other.to_string(),
    };
    Ok(RawToolCall { id: v.get("id").and_then(Value::as_str).map(String::from), name: name.into(), arguments })
}

/// One message in OpenAI chat format. Provenance stays engine-side.
pub fn wire_message(m: &Message) -> Value {
    let mut o = Map::new();
    o.insert("role".into(), Value::from(m.role.as_str()));
    o.insert("content".into(), Value::from(m.content.clone()));
    if m.role == Role::Assistant && !m.tool_calls.is_empty() {
        let calls = m
            .tool_calls
            .iter()
            .map(|c| {
                json!({
                    "id": c.call_id,
                    "type": "function",
                    "function": {"name": c.tool_name, "arguments": Value::Object(c.arguments.clone()).to_string()},
                })
            })
            .collect();
        o.insert("tool_calls".into(), Value::Array(calls));
    }
    if let Some(id) = &m.tool_call_id {
        o.insert("tool_call_id".into(), Value::from(id.clone()));
    }
    Value::Object(o)
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError> {
        if req.input_ids.is_empty() {
            return Err(BackendError::InvalidRequest("input_ids is empty".into()));
        }
        if req.params.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        let body = self.request_body(req).to_string();
        let text = self.post(&body)?;
        self.parse_response(&text, req.params.max_new_tokens)
    }
}
