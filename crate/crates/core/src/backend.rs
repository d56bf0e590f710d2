//! Generation backends: the trait the agent loop calls, and a deterministic
//! scripted implementation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::message::Message;
use crate::tokenizer::{TokenId, Tokenizer};
use crate::tool::ToolSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { max_new_tokens: 4096, temperature: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
}

/// A tool call as delivered by a structured (HTTP) backend. Arguments are
/// still the raw JSON text the model produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawToolCall {
    pub id: Option<String>,
    pub name: String,
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub output_ids: Vec<TokenId>,
    pub logprobs: Option<Vec<f64>>,
    pub finish_reason: FinishReason,
    /// Text of the reply when the backend works in text rather than ids.
    pub text: Option<String>,
    /// Structured calls; `None` means they must be parsed from the text.
    pub tool_calls: Option<Vec<RawToolCall>>,
    /// `output_ids` were produced by re-tokenizing text.
    pub tokens_approximate: bool,
}

/// Everything a backend may look at for one call.
#[derive(Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub task_id: &'a str,
    pub rollout: u32,
    pub turn: u32,
    pub input_ids: &'a [TokenId],
    pub messages: &'a [Message],
    pub tools: &'a [&'a ToolSpec],
    pub params: SamplingParams,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("unparsable backend response: {0}")]
    WireFormat(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
}

/// Uniform generation interface. Implementations must accept concurrent
/// calls for distinct trajectories.
pub trait GenerationBackend: Send + Sync {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError>;
}

/// Ordered model turns for one task variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub turns: Vec<String>,
    /// Repeat the turns forever instead of running out.
    #[serde(default)]
    pub looping: bool,
    /// Turn at which the backend reports itself unavailable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_at_turn: Option<u32>,
}

impl Script {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(turns: I) -> Self {
        Self { turns: turns.into_iter().map(Into::into).collect(), looping: false, fail_at_turn: None }
    }

    pub fn looping<I: IntoIterator<Item = S>, S: Into<String>>(turns: I) -> Self {
        Self { looping: true, ..Self::new(turns) }
    }
}

/// Per-task scripts. Rollout `r` of a task plays variant `r % variants`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub scripts: BTreeMap<String, Vec<Script>>,
    #[serde(default)]
    pub emit_logprobs: bool,
}

impl ScriptedPolicy {
    pub fn insert(&mut self, task_id: impl Into<String>, script: Script) {
        self.scripts.entry(task_id.into()).or_default().push(script);
    }

    pub fn script(&self, task_id: &str, rollout: u32) -> Option<&Script> {
        let variants = self.scripts.get(task_id)?;
        if variants.is_empty() {
            return None;
        }
        variants.get(rollout as usize % variants.len())
    }

    /// Every scripted text, for seeding a tokenizer corpus.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.scripts.values().flatten().flat_map(|s| s.turns.iter().map(String::as_str))
    }
}

/// Replays [`ScriptedPolicy`] turns as token ids. Stateless across calls:
/// the reply depends only on (task, rollout, turn, seed).
pub struct ScriptedBackend {
    policy: ScriptedPolicy,
    tokenizer: Arc<Tokenizer>,
}

impl ScriptedBackend {
    pub fn new(policy: ScriptedPolicy, tokenizer: Arc<Tokenizer>) -> Self {
        Self { policy, tokenizer }
    }

    pub fn policy(&self) -> &ScriptedPolicy {
        &self.policy
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError> {
        if req.input_ids.is_empty() {
            return Err(BackendError::InvalidRequest("input_ids is empty".into()));
        }
        if req.params.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        let script = self.policy.script(req.task_id, req.rollout).ok_or_else(|| {
            BackendError::Unavailable(alloc::format!("no script for task `{}`", req.task_id))
        })?;
        if script.fail_at_turn == Some(req.turn) {
            return Err(BackendError::Unavailable(alloc::format!("scripted outage at turn {}", req.turn)));
        }
        let idx = req.turn as usize;
        let text = if script.looping && !script.turns.is_empty() {
            &script.turns[idx % script.turns.len()]
        } else {
            script.turns.get(idx).ok_or_else(|| {
                BackendError::Unavailable(alloc::format!("script for `{}` exhausted at turn {idx}", req.task_id))
            })?
        };
        let mut output_ids = self.tokenizer.tokenize(text);
        let limit = req.params.max_new_tokens as usize;
        let finish_reason = if output_ids.len() > limit {
            output_ids.truncate(limit);
            FinishReason::Length
        } else {
            FinishReason::Stop
        };
        let logprobs = self.policy.emit_logprobs.then(|| {
            output_ids
                .iter()
                .enumerate()
                .map(|(i, &id)| pseudo_logprob(req.params.seed, req.turn, i, id))
                .collect()
        });
        Ok(GenerationResult {
            output_ids,
            logprobs,
            finish_reason,
            text: None,
            tool_calls: None,
            tokens_approximate: false,
        })
    }
}

/// Deterministic stand-in for a sampled token's log-probability, in (-2, 0].
fn pseudo_logprob(seed: u64, turn: u32, pos: usize, id: TokenId) -> f64 {
    let h = crate::mix64(seed ^ ((turn as u64) << 32) ^ ((pos as u64) << 8) ^ id as u64);
    -((h % 2000) as f64) / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn backend(turn: &str) -> ScriptedBackend {
        let mut policy = ScriptedPolicy::default();
        policy.insert("t", Script::new([turn]));
        let tok = Arc::new(Tokenizer::from_corpus([turn]));
        ScriptedBackend::new(policy, tok)
    }

    fn req<'a>(ids: &'a [TokenId], max_new_tokens: u32) -> GenerationRequest<'a> {
        GenerationRequest {
            task_id: "t",
            rollout: 0,
            turn: 0,
            input_ids: ids,
            messages: &[],
            tools: &[],
            params: SamplingParams { max_new_tokens, ..Default::default() },
        }
    }

    #[test]
    fn final_answer_token_cost() {
        // seven whitespace pieces, all in the corpus
        let b = backend("the final answer is forty two .");
        let r = b.generate(&req(&[1], 100)).unwrap();
        assert_eq!(r.output_ids.len(), 7);
        assert_eq!(r.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn truncation_sets_length() {
        let b = backend("the final answer is forty two .");
        let r = b.generate(&req(&[1], 3)).unwrap();
        assert_eq!(r.output_ids.len(), 3);
        assert_eq!(r.finish_reason, FinishReason::Length);
    }

    #[test]
    fn deterministic_and_logprob_lengths() {
        let mut policy = ScriptedPolicy { emit_logprobs: true, ..Default::default() };
        policy.insert("t", Script::new(["a b c"]));
        let b = ScriptedBackend::new(policy, Arc::new(Tokenizer::from_corpus(["a b c"])));
        let r1 = b.generate(&req(&[5, 6], 10)).unwrap();
        let r2 = b.generate(&req(&[5, 6], 10)).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.logprobs.as_ref().unwrap().len(), r1.output_ids.len());
        assert!(r1.logprobs.unwrap().iter().all(|l| *l <= 0.0));
    }

    #[test]
    fn empty_input_is_rejected() {
        let b = backend("x");
        assert!(matches!(b.generate(&req(&[], 10)), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn exhausted_and_outage() {
        let mut policy = ScriptedPolicy::default();
        policy.insert("t", Script { turns: vec!["a".into()], looping: false, fail_at_turn: Some(0) });
        let b = ScriptedBackend::new(policy, Arc::new(Tokenizer::byte_level()));
        assert!(matches!(b.generate(&req(&[1], 10)), Err(BackendError::Unavailable(_))));
        let b = backend("x");
        let mut r = req(&[1], 10);
        r.turn = 1;
        assert!(matches!(b.generate(&r), Err(BackendError::Unavailable(_))));
    }
}
