//! Transition capture, prefix packing and batch assembly.
//!
//! Every model call is recorded as a [`Transition`]. [`pack`] merges runs of
//! transitions whose inputs extend the previous input+output into one
//! loss-masked [`TrainingSample`]; [`post_process`] attaches rewards and
//! metrics and emits rows in the backend-agnostic batch layout.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::tokenizer::TokenId;

/// Logprob written for tokens whose logprob is unknown.
pub const LOGPROB_SENTINEL: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub traj_id: usize,
    pub turn: u32,
    pub input_ids: Vec<TokenId>,
    pub output_ids: Vec<TokenId>,
    pub logprobs: Option<Vec<f64>>,
    /// Start and end of the call, in microseconds of the run's clock.
    pub wall_start: u64,
    pub wall_end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("out-of-order turn: expected {expected}, got {got}")]
    OutOfOrderTurn { expected: u32, got: u32 },
    #[error("logprobs length {got} does not match {expected} output tokens")]
    LogprobLength { expected: usize, got: usize },
}

/// Append-only per-trajectory transition log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionBuffer {
    traj_id: usize,
    transitions: Vec<Transition>,
}

impl TransitionBuffer {
    pub fn new(traj_id: usize) -> Self {
        Self { traj_id, transitions: Vec::new() }
    }

    /// Appends the transition for `turn`, which must be the next turn.
    /// Returns the transition's index.
    pub fn record(
        &mut self,
        turn: u32,
        input_ids: Vec<TokenId>,
        output_ids: Vec<TokenId>,
        logprobs: Option<Vec<f64>>,
        wall: (u64, u64),
    ) -> Result<usize, RecordError> {
        let expected = self.transitions.len() as u32;
        if turn != expected {
            return Err(RecordError::OutOfOrderTurn { expected, got: turn });
        }
        if let Some(lp) = &logprobs {
            if lp.len() != output_ids.len() {
                return Err(RecordError::LogprobLength { expected: output_ids.len(), got: lp.len() });
            }
        }
        self.transitions.push(Transition {
            traj_id: self.traj_id,
            turn,
            input_ids,
            output_ids,
            logprobs,
            wall_start: wall.0,
            wall_end: wall.1,
        });
        Ok(self.transitions.len() - 1)
    }

    /// Re-times the most recent transition. Used by the simulator, which
    /// only learns when a call ran after it has been recorded.
    pub fn stamp_last(&mut self, start: u64, end: u64) {
        if let Some(t) = self.transitions.last_mut() {
            t.wall_start = start;
            t.wall_end = end;
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn into_transitions(self) -> Vec<Transition> {
        self.transitions
    }
}

/// A packed sequence: prompt plus a response whose mask is 1 exactly on
/// model-generated tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub prompt_token_ids: Vec<TokenId>,
    pub response_ids: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    pub loss_mask: Vec<u8>,
    /// Every model token in the sample came with a real logprob.
    pub logprobs_present: bool,
    /// Turns of the first and last merged transitions.
    pub turns: (u32, u32),
}

impl TrainingSample {
    fn start(t: &Transition) -> Self {
        let mut s = Self {
            prompt_token_ids: t.input_ids.clone(),
            response_ids: Vec::new(),
            logprobs: Vec::new(),
            loss_mask: Vec::new(),
            logprobs_present: true,
            turns: (t.turn, t.turn),
        };
        s.push_output(t);
        s
    }

    fn push_output(&mut self, t: &Transition) {
        self.response_ids.extend_from_slice(&t.output_ids);
        self.loss_mask.extend(core::iter::repeat_n(1u8, t.output_ids.len()));
        match &t.logprobs {
            Some(lp) => self.logprobs.extend_from_slice(lp),
            None => {
                self.logprobs_present &= t.output_ids.is_empty();
                self.logprobs.extend(core::iter::repeat_n(LOGPROB_SENTINEL, t.output_ids.len()));
            }
        }
        self.turns.1 = t.turn;
    }

    fn full_len(&self) -> usize {
        self.prompt_token_ids.len() + self.response_ids.len()
    }

    fn is_prefix_of(&self, ids: &[TokenId]) -> bool {
        let p = self.prompt_token_ids.len();
        ids.len() >= self.full_len()
            && ids[..p] == self.prompt_token_ids[..]
            && ids[p..self.full_len()] == self.response_ids[..]
    }

    /// Prompt followed by response.
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut v = self.prompt_token_ids.clone();
        v.extend_from_slice(&self.response_ids);
        v
    }
}

/// Greedy left-to-right prefix packing over a turn-ordered buffer.
///
/// A transition joins the current sample iff its input starts with the
/// sample's prompt+response; the tokens between are injected (mask 0) and its
/// output is appended with mask 1. Otherwise it opens a new sample.
pub fn pack(buffer: &[Transition]) -> Vec<TrainingSample> {
    let mut out: Vec<TrainingSample> = Vec::new();
    for t in buffer {
        match out.last_mut() {
            Some(cur) if cur.is_prefix_of(&t.input_ids) => {
                let injected = &t.input_ids[cur.full_len()..];
                cur.response_ids.extend_from_slice(injected);
                cur.loss_mask.extend(core::iter::repeat_n(0u8, injected.len()));
                cur.logprobs.extend(core::iter::repeat_n(LOGPROB_SENTINEL, injected.len()));
                cur.push_output(t);
            }
            _ => out.push(TrainingSample::start(t)),
        }
    }
    out
}

/// One row of the masked-sequence layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub prompt_token_ids: Vec<TokenId>,
    pub response_ids: Vec<TokenId>,
    pub logprobs: Vec<f64>,
    #[serde(rename = "loss_masks")]
    pub loss_mask: Vec<u8>,
    #[serde(rename = "traj_rewards")]
    pub traj_reward: f64,
    pub traj_idx: usize,
    pub rollout_metrics: BTreeMap<String, Value>,
}

/// One row of the transition-list layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionRecord {
    pub traj_idx: usize,
    pub turn: u32,
    pub input_ids: Vec<TokenId>,
    pub output_ids: Vec<TokenId>,
    pub logprobs: Option<Vec<f64>>,
    pub traj_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchRecord {
    pub samples: Vec<SampleRecord>,
    pub transitions: Vec<TransitionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportLayout {
    MaskedSequence,
    TransitionList,
}

impl ExportLayout {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MaskedSequence => "masked_sequence",
            Self::TransitionList => "transition_list",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unsupported export layout `{0}`")]
pub struct UnsupportedLayout(pub String);

impl FromStr for ExportLayout {
    type Err = UnsupportedLayout;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "masked_sequence" => Ok(Self::MaskedSequence),
            "transition_list" => Ok(Self::TransitionList),
            other => Err(UnsupportedLayout(other.into())),
        }
    }
}

/// A finished trajectory as `post_process` sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct FinishedTrajectory<'a> {
    pub traj_idx: usize,
    pub transitions: &'a [Transition],
    pub reward: Option<f64>,
    pub metrics: &'a BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PostProcessError {
    #[error("trajectory {0} reached post-processing without a reward")]
    MissingReward(usize),
}

/// Packs and rewards every trajectory; rows are ordered by `traj_idx`, then
/// by sample order.
pub fn post_process(trajectories: &[FinishedTrajectory<'_>]) -> Result<BatchRecord, PostProcessError> {
    let mut order: Vec<&FinishedTrajectory<'_>> = trajectories.iter().collect();
    order.sort_by_key(|t| t.traj_idx);
    let mut batch = BatchRecord::default();
    for t in order {
        let reward = t.reward.ok_or(PostProcessError::MissingReward(t.traj_idx))?;
        for (i, s) in pack(t.transitions).into_iter().enumerate() {
            let mut metrics = t.metrics.clone();
            metrics.insert("logprobs_present".into(), Value::Bool(s.logprobs_present));
            metrics.insert("sample_index".into(), Value::from(i));
            batch.samples.push(SampleRecord {
                prompt_token_ids: s.prompt_token_ids,
                response_ids: s.response_ids,
                logprobs: s.logprobs,
                loss_mask: s.loss_mask,
                traj_reward: reward,
                traj_idx: t.traj_idx,
                rollout_metrics: metrics,
            });
        }
        batch.transitions.extend(t.transitions.iter().map(|tr| TransitionRecord {
            traj_idx: t.traj_idx,
            turn: tr.turn,
            input_ids: tr.input_ids.clone(),
            output_ids: tr.output_ids.clone(),
            logprobs: tr.logprobs.clone(),
            traj_reward: reward,
        }));
    }
    Ok(batch)
}
