//! The agent-run stage: alternate generation and tool execution until a
//! terminal condition.
//!
//! [`TrajectoryRunner`] is a step machine. Each [`TrajectoryRunner::step`]
//! performs exactly one unit of work (one generation or one tool call) and
//! reports what it did, so a caller can charge it to a resource: the
//! simulator maps actions to virtual-time grants, the live runner just keeps
//! stepping.

mod fault;
mod parse;

pub use fault::{
    classify_failure, Classification, Fault, RecoverableCondition, RecoverableKind, TerminationKind,
    TerminationReason,
};
pub use parse::{
    convert_raw_calls, fresh_call_id, parse_arguments, parse_tool_calls, render_call, ParseFailure, ParsedTurn,
    CALL_CLOSE, CALL_OPEN,
};

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::time::Duration;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{BackendError, GenerationBackend, GenerationRequest, SamplingParams};
use crate::clock::Clock;
use crate::message::{render, render_context, Message, Provenance, Role, GENERATION_PROMPT, TURN_CLOSE};
use crate::recorder::{RecordError, TransitionBuffer};
use crate::registry::{InvokeError, InvokeOptions, Registry, TaskError, TaskSpec};
use crate::tokenizer::{TokenId, Tokenizer};
use crate::tool::{Runtime, RuntimeClass, ToolSpec, ToolStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HintTrigger {
    StepBudget,
    ContextBudget,
    RepeatedFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HintConfig {
    /// Budget hint once remaining steps drop to this many.
    pub step_threshold: u32,
    /// Context hint once remaining tokens drop to this many; defaults to a
    /// tenth of the task's window.
    pub context_threshold_tokens: Option<u32>,
    /// Consecutive same-kind recoverable faults that earn a corrective hint.
    pub failure_hint_after: u32,
    /// Consecutive same-kind faults that end the episode.
    pub escalate_after: u32,
}

impl Default for HintConfig {
    fn default() -> Self {
        Self { step_threshold: 3, context_threshold_tokens: None, failure_hint_after: 3, escalate_after: 4 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hints: HintConfig,
    pub sampling: SamplingParams,
}

/// How a fault was handled, for auditing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    /// Generations completed when the fault happened.
    pub step_index: u32,
    pub classification: FaultClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultClass {
    Recoverable(RecoverableKind),
    /// A recoverable kind that hit the escalation limit.
    Escalated(RecoverableKind),
    Terminal(TerminationKind),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub messages: Vec<Message>,
    pub step_index: u32,
    pub tokens_used: u32,
    pub termination: Option<TerminationReason>,
    pub constraint_terminated: bool,
    pub hints_given: Vec<HintTrigger>,
    pub fault_log: Vec<FaultRecord>,
    pub answer: Option<String>,
}

impl TrajectoryState {
    /// The answer of a trajectory that completed its task.
    pub fn final_answer(&self) -> Option<&str> {
        match &self.termination {
            Some(t) if t.kind == TerminationKind::TaskComplete => self.answer.as_deref(),
            _ => None,
        }
    }

    /// Sets the termination; the first one wins.
    pub fn terminate(&mut self, reason: TerminationReason) {
        if self.termination.is_none() {
            self.constraint_terminated = reason.kind.is_constraint();
            self.termination = Some(reason);
        }
    }

    pub fn hint_given(&self, trigger: HintTrigger) -> bool {
        self.hints_given.contains(&trigger)
    }
}

/// Text of the hint for a trigger.
pub fn hint_text(trigger: HintTrigger, remaining: u32) -> String {
    match trigger {
        HintTrigger::StepBudget => format!(
            "Hint: only {remaining} steps remain in your budget. Wrap up and give your final answer soon."
        ),
        HintTrigger::ContextBudget => format!(
            "Hint: only {remaining} tokens of context remain. Finish or summarize before the window is exceeded."
        ),
        HintTrigger::RepeatedFailure => String::from(
            "Hint: your last attempts failed the same way several times. Re-read the tool descriptions and change approach.",
        ),
    }
}

/// Appends one injected hint if `trigger` is set and has not fired before.
/// Returns whether a message was appended.
pub fn inject_hint(state: &mut TrajectoryState, trigger: Option<HintTrigger>, remaining: u32) -> bool {
    let Some(trigger) = trigger else { return false };
    if state.hint_given(trigger) {
        return false;
    }
    state.hints_given.push(trigger);
    state
        .messages
        .push(Message::new(Role::User, hint_text(trigger, remaining), Provenance::Injected));
    true
}

/// The step-budget trigger, if it fires at the current step.
pub fn step_budget_trigger(state: &TrajectoryState, max_steps: u32, threshold: u32) -> Option<HintTrigger> {
    let remaining = max_steps.saturating_sub(state.step_index);
    (remaining <= threshold).then_some(HintTrigger::StepBudget)
}

/// Charges for per-call tool latency in simulated runs.
pub trait ToolLatency {
    fn latency(&self, tool: &str, class: RuntimeClass, seq: u32) -> Duration;
}

/// External services one step may use.
#[derive(Clone, Copy)]
pub struct StepEnv<'a> {
    pub backend: &'a dyn GenerationBackend,
    pub clock: &'a dyn Clock,
    pub tool_latency: Option<&'a dyn ToolLatency>,
}

/// What a step did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Generated { input_tokens: usize, output_tokens: usize },
    /// `charged` is the modelled execution time, `None` when the call was
    /// rejected before running or no latency model is attached.
    ToolExecuted { tool: String, class: RuntimeClass, charged: Option<Duration> },
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Drives one trajectory's agent run.
pub struct TrajectoryRunner<'r> {
    registry: &'r Registry,
    tokenizer: &'r Tokenizer,
    task: &'r TaskSpec,
    tools: Vec<&'r ToolSpec>,
    rollout: u32,
    config: AgentConfig,
    state: TrajectoryState,
    runtime: Runtime,
    buffer: TransitionBuffer,
    context_ids: Vec<TokenId>,
    pending: VecDeque<crate::message::ToolCall>,
    streak: Option<(RecoverableKind, u32)>,
    used_call_ids: BTreeSet<String>,
    tool_calls: u32,
    tokens_approximate: bool,
    output_tokens: u64,
}

impl<'r> TrajectoryRunner<'r> {
    pub fn new(
        registry: &'r Registry,
        tokenizer: &'r Tokenizer,
        task: &'r TaskSpec,
        traj_idx: usize,
        rollout: u32,
        runtime: Runtime,
        config: AgentConfig,
    ) -> Result<Self, TaskError> {
        registry.validate_task(task)?;
        let messages = registry.build_instruction(task)?;
        let context_ids = render_context(tokenizer, &messages);
        Ok(Self {
            registry,
            tokenizer,
            task,
            tools: registry.toolset(task),
            rollout,
            config,
            state: TrajectoryState { messages, ..Default::default() },
            runtime,
            buffer: TransitionBuffer::new(traj_idx),
            context_ids,
            pending: VecDeque::new(),
            streak: None,
            used_call_ids: BTreeSet::new(),
            tool_calls: 0,
            tokens_approximate: false,
            output_tokens: 0,
        })
    }

    pub fn state(&self) -> &TrajectoryState {
        &self.state
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    pub fn buffer(&self) -> &TransitionBuffer {
        &self.buffer
    }

    pub fn buffer_mut(&mut self) -> &mut TransitionBuffer {
        &mut self.buffer
    }

    /// Token context the next generation would extend.
    pub fn context_ids(&self) -> &[TokenId] {
        &self.context_ids
    }

    pub fn is_finished(&self) -> bool {
        self.state.termination.is_some() && self.pending.is_empty()
    }

    pub fn into_parts(self) -> (TrajectoryState, Runtime, TransitionBuffer) {
        (self.state, self.runtime, self.buffer)
    }

    /// Per-trajectory numbers exported with every training row.
    pub fn metrics(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let kind = self.state.termination.as_ref().map(|t| t.kind.as_str()).unwrap_or("none");
        m.insert("termination".into(), Value::from(kind));
        m.insert("constraint_terminated".into(), Value::Bool(self.state.constraint_terminated));
        m.insert("steps".into(), Value::from(self.state.step_index));
        m.insert("tool_calls".into(), Value::from(self.tool_calls));
        m.insert("output_tokens".into(), Value::from(self.output_tokens));
        m.insert("tokens_approximate".into(), Value::Bool(self.tokens_approximate));
        let recoverable = self
            .state
            .fault_log
            .iter()
            .filter(|f| matches!(f.classification, FaultClass::Recoverable(_)))
            .count();
        m.insert("recoverable_faults".into(), Value::from(recoverable));
        m.insert("hints".into(), Value::from(self.state.hints_given.len()));
        m
    }

    /// Performs the next unit of work.
    pub fn step(&mut self, env: &StepEnv<'_>) -> Result<Action, RunError> {
        if let Some(call) = self.pending.pop_front() {
            return Ok(self.execute_call(call, env));
        }
        if self.state.termination.is_some() {
            return Ok(Action::Finished);
        }
        self.generate(env)
    }

    fn generate(&mut self, env: &StepEnv<'_>) -> Result<Action, RunError> {
        let max_steps = self.task.max_steps;
        if self.state.step_index >= max_steps {
            self.terminal(Fault::MaxStepsReached { limit: max_steps });
            return Ok(Action::Finished);
        }
        let hints = self.config.hints;
        let trigger = step_budget_trigger(&self.state, max_steps, hints.step_threshold);
        let remaining = max_steps - self.state.step_index;
        self.hint(trigger, remaining);

        let limit = self.task.max_context_tokens;
        let prompt_len = self.tokenizer.count(GENERATION_PROMPT);
        let ctx_threshold = hints.context_threshold_tokens.unwrap_or(limit / 10);
        let needed = self.context_ids.len() + prompt_len;
        if needed <= limit as usize {
            let left = limit as usize - needed;
            if left <= ctx_threshold as usize {
                self.hint(Some(HintTrigger::ContextBudget), left as u32);
            }
        }

        let mut input = self.context_ids.clone();
        self.tokenizer.tokenize_into(GENERATION_PROMPT, &mut input);
        if input.len() > limit as usize {
            self.state.tokens_used = input.len() as u32;
            self.terminal(Fault::ContextExceeded { needed: input.len(), limit });
            return Ok(Action::Finished);
        }
        self.state.tokens_used = input.len() as u32;

        let turn = self.state.step_index;
        let started = env.clock.now();
        let req = GenerationRequest {
            task_id: &self.task.task_id,
            rollout: self.rollout,
            turn,
            input_ids: &input,
            messages: &self.state.messages,
            tools: &self.tools,
            params: self.config.sampling,
        };
        let result = match env.backend.generate(&req) {
            Ok(r) => r,
            Err(e) => {
                self.terminal(Fault::Internal(e.to_string()));
                return Err(e.into());
            }
        };
        let ended = env.clock.now();
        self.tokens_approximate |= result.tokens_approximate;
        self.output_tokens += result.output_ids.len() as u64;

        let input_tokens = input.len();
        let output_tokens = result.output_ids.len();
        self.buffer.record(
            turn,
            input.clone(),
            result.output_ids.clone(),
            result.logprobs.clone(),
            (started.as_micros() as u64, ended.as_micros() as u64),
        )?;
        self.state.step_index += 1;

        let text = match &result.text {
            Some(t) => t.clone(),
            None => self.tokenizer.detokenize(&result.output_ids).unwrap_or_default(),
        };
        self.context_ids = input;
        self.context_ids.extend_from_slice(&result.output_ids);
        self.tokenizer.tokenize_into(TURN_CLOSE, &mut self.context_ids);

        let parsed = match &result.tool_calls {
            Some(raw) if !raw.is_empty() => convert_raw_calls(raw, turn).map(ParsedTurn::Calls),
            _ => parse_tool_calls(&text, turn),
        };
        let mut model_msg = Message::new(Role::Assistant, text, Provenance::Model);
        match parsed {
            Ok(ParsedTurn::Calls(mut calls)) => {
                for (k, c) in calls.iter_mut().enumerate() {
                    if !self.used_call_ids.insert(c.call_id.clone()) {
                        c.call_id = format!("{}_{turn}_{k}", c.call_id);
                        self.used_call_ids.insert(c.call_id.clone());
                    }
                }
                self.resolved(RecoverableKind::ParseFailure);
                model_msg.tool_calls = calls.clone();
                self.state.messages.push(model_msg);
                self.pending.extend(calls);
            }
            Ok(ParsedTurn::FinalAnswer(answer)) => {
                self.state.messages.push(model_msg);
                self.state.answer = Some(answer);
                self.state.terminate(TerminationReason {
                    kind: TerminationKind::TaskComplete,
                    detail: String::from("final answer"),
                });
            }
            Err(p) => {
                self.state.messages.push(model_msg);
                self.fault(Fault::ParseFailure(p), None);
            }
        }
        Ok(Action::Generated { input_tokens, output_tokens })
    }

    fn execute_call(&mut self, call: crate::message::ToolCall, env: &StepEnv<'_>) -> Action {
        self.tool_calls += 1;
        let seq = self.tool_calls - 1;
        let Some(spec) = self.tools.iter().copied().find(|s| s.name == call.tool_name) else {
            let available = self.tools.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", ");
            self.fault(
                Fault::UnavailableFunction { name: call.tool_name.clone(), available },
                Some(&call.call_id),
            );
            return Action::ToolExecuted { tool: call.tool_name, class: RuntimeClass::Stateless, charged: None };
        };
        let class = spec.runtime_class;
        let latency = env.tool_latency.map(|l| l.latency(&spec.name, class, seq));
        let opts = InvokeOptions { clock: env.clock, simulated_latency: latency };
        let outcome = self.registry.invoke_tool(&call, &mut self.runtime, &self.state.messages, opts);
        let charged = latency.map(|l| l.min(spec.timeout));
        match outcome {
            Ok(result) => match result.status {
                ToolStatus::Ok | ToolStatus::RecoverableError => {
                    if result.status == ToolStatus::Ok {
                        self.resolved(RecoverableKind::InvalidParams);
                        self.resolved(RecoverableKind::ToolTimeout);
                    }
                    if let Some(patch) = result.state_patch {
                        self.state.messages = patch;
                        self.context_ids = render_context(self.tokenizer, &self.state.messages);
                    }
                    self.push(Message::tool_result(&call.call_id, result.content, Provenance::Tool));
                }
                ToolStatus::Timeout => {
                    self.fault(Fault::ToolTimeout { tool: spec.name.clone(), detail: result.content }, Some(&call.call_id));
                }
            },
            Err(InvokeError::InvalidArguments { tool, source }) => {
                self.fault(
                    Fault::InvalidParams { tool, param: source.param, reason: source.reason },
                    Some(&call.call_id),
                );
            }
            Err(InvokeError::UnknownTool(name)) => self.terminal(Fault::UnknownTool(name)),
            Err(e @ InvokeError::IllegalStatePatch(_)) => self.terminal(Fault::Internal(e.to_string())),
        }
        Action::ToolExecuted { tool: call.tool_name, class, charged }
    }

    fn push(&mut self, msg: Message) {
        self.tokenizer.tokenize_into(&render(&msg), &mut self.context_ids);
        self.state.messages.push(msg);
    }

    fn hint(&mut self, trigger: Option<HintTrigger>, remaining: u32) {
        if inject_hint(&mut self.state, trigger, remaining) {
            let msg = self.state.messages.last().expect("hint was just appended");
            self.tokenizer.tokenize_into(&render(msg), &mut self.context_ids);
        }
    }

    fn resolved(&mut self, kind: RecoverableKind) {
        if matches!(self.streak, Some((k, _)) if k == kind) {
            self.streak = None;
        }
    }

    fn terminal(&mut self, fault: Fault) {
        match classify_failure(&fault) {
            Classification::Terminal(reason) => {
                self.state.fault_log.push(FaultRecord {
                    step_index: self.state.step_index,
                    classification: FaultClass::Terminal(reason.kind),
                });
                self.state.terminate(reason);
                self.pending.clear();
            }
            Classification::Recoverable(_) => self.fault(fault, None),
        }
    }

    fn fault(&mut self, fault: Fault, call_id: Option<&str>) {
        let cond = match classify_failure(&fault) {
            Classification::Terminal(_) => return self.terminal(fault),
            Classification::Recoverable(c) => c,
        };
        let count = match self.streak {
            Some((k, n)) if k == cond.kind => n + 1,
            _ => 1,
        };
        self.streak = Some((cond.kind, count));
        let hints = self.config.hints;
        if count >= hints.escalate_after {
            self.state.fault_log.push(FaultRecord {
                step_index: self.state.step_index,
                classification: FaultClass::Escalated(cond.kind),
            });
            self.state.terminate(TerminationReason {
                kind: TerminationKind::UnrecoverableFault,
                detail: format!("{count} consecutive {:?} faults", cond.kind),
            });
            self.pending.clear();
            return;
        }
        self.state.fault_log.push(FaultRecord {
            step_index: self.state.step_index,
            classification: FaultClass::Recoverable(cond.kind),
        });
        let msg = match call_id {
            Some(id) => Message::tool_result(id, cond.feedback, Provenance::Injected),
            None => Message::new(Role::User, cond.feedback, Provenance::Injected),
        };
        self.push(msg);
        if count == hints.failure_hint_after {
            self.hint(Some(HintTrigger::RepeatedFailure), 0);
        }
    }
}

/// Result of running a trajectory to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub state: TrajectoryState,
    pub runtime: Runtime,
    pub buffer: TransitionBuffer,
    pub metrics: BTreeMap<String, Value>,
}

/// Runs the agent loop until it finishes.
pub fn run_trajectory(mut runner: TrajectoryRunner<'_>, env: &StepEnv<'_>) -> Result<RunOutcome, RunError> {
    while runner.step(env)? != Action::Finished {}
    let metrics = runner.metrics();
    let (state, runtime, buffer) = runner.into_parts();
    Ok(RunOutcome { state, runtime, buffer, metrics })
}
