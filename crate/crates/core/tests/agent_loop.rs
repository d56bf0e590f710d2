mod common;

use common::{calc, Harness};
use rollout_core::agent::{
    inject_hint, AgentConfig, FaultClass, HintTrigger, RecoverableKind, RunError, TerminationKind, TrajectoryState,
};
use rollout_core::backend::{BackendError, Script};
use rollout_core::builtin::{CALCULATOR, KV_STORE, SUMMARIZE_HISTORY};
use rollout_core::message::{Provenance, Role};
use rollout_core::recorder::pack;
use rollout_core::registry::TaskSpec;
use serde_json::json;

fn task(tools: &[&str]) -> TaskSpec {
    TaskSpec::new("t", tools, json!({"prompt": "What is 6 * 7?", "answer": "42"}))
}

#[test]
fn immediate_answer_completes() {
    let t = task(&[CALCULATOR]);
    let h = Harness::single(&t, Script::new(["42"]));
    let out = h.run(&t, 0, AgentConfig::default()).unwrap();
    assert_eq!(out.state.termination.as_ref().unwrap().kind, TerminationKind::TaskComplete);
    assert_eq!(out.buffer.len(), 1);
    assert_eq!(out.state.final_answer(), Some("42"));
}

#[test]
fn three_calls_then_answer() {
    let t = task(&[CALCULATOR]);
    let h = Harness::single(&t, Script::new([calc("1+1"), calc("2*3"), calc("6*7"), "42".into()]));
    let mut t50 = t.clone();
    t50.max_steps = 50;
    let out = h.run(&t50, 0, AgentConfig::default()).unwrap();
    assert_eq!(out.buffer.len(), 4);
    assert_eq!(out.state.step_index, 4);
    assert_eq!(out.metrics["tool_calls"], json!(3));
    let turns: Vec<u32> = out.buffer.transitions().iter().map(|x| x.turn).collect();
    assert_eq!(turns, [0, 1, 2, 3]);
}

#[test]
fn looping_script_hits_step_limit() {
    let mut t = task(&[CALCULATOR]);
    t.max_steps = 5;
    let h = Harness::single(&t, Script::looping([calc("1+1")]));
    let out = h.run(&t, 0, AgentConfig::default()).unwrap();
    assert_eq!(out.state.termination.as_ref().unwrap().kind, TerminationKind::MaxStepsReached);
    assert!(out.state.constraint_terminated);
    assert_eq!(out.buffer.len(), 5);
    assert!(out.state.step_index <= t.max_steps);
}

#[test]
fn step_budget_hint_once() {
    let mut t = task(&[CALCULATOR]);
    t.max_steps = 6;
    let h = Harness::single(&t, Script::looping([calc("1+1")]));
    let out = h.run(&t, 0, AgentConfig::default()).unwrap();
    let hints: Vec<_> = out
        .state
        .messages
        .iter()
        .filter(|m| m.provenance == Provenance::Injected && m.content.contains("steps remain"))
        .collect();
    assert_eq!(hints.len(), 1);
    assert!(hints[0].content.contains("only 3 steps"));
    assert_eq!(out.state.hints_given, [HintTrigger::StepBudget]);
}

#[test]
fn inject_hint_rules() {
    let mut s = TrajectoryState::default();
    assert!(!inject_hint(&mut s, None, 2));
    assert!(s.messages.is_empty());
    assert!(inject_hint(&mut s, Some(HintTrigger::StepBudget), 2));
    assert!(!inject_hint(&mut s, Some(HintTrigger::StepBudget), 1));
    assert_eq!(s.messages.len(), 1);
    assert_eq!(s.messages[0].provenance, Provenance::Injected);
}

#[test]
fn context_limit_is_checked_before_generation() {
    let mut t = task(&[CALCULATOR]);
    t.max_context_tokens = 20;
    let h = Harness::single(&t, Script::new(["42"]));
    let out = h.run(&t, 0, AgentConfig::default()).unwrap();
    assert_eq!(out.state.termination.unwrap().kind, TerminationKind::ContextExceeded);
    assert!(out.state.constraint_terminated);
    assert!(out.buffer.is_empty());
}

#[test]
fn parse_failure_is_followed_by_generation() {
    let t = task(&[CALCULATOR]);
    let h = Harness::single(&t, Script::new(["<tool_call>{\"name\": oops</tool_call>".to_string(), "42".into()]));
    let out = h.run(&t, 0, AgentConfig::default()).unwrap();
    assert_eq!(out.state.termination.unwrap().kind, TerminationKind::TaskComplete);
    assert_eq!(out.buffer.len(), 2);
    assert_eq!(out.state.fault_log[0].classification, FaultClass::Recoverable(RecoverableKind::ParseFailure));
    let feedback = out.state.messages.iter().find(|m| m.content.contains("could not be parsed")).unwrap();
    assert_eq!(feedback.provenance, Provenance::Injected);
}

#[test]
fn bad_parameter_feedback_names_it() {
    let t = task(&[CALCULATOR]);
    let bad = "<tool_call>{\"name\": \"calculator\", \"arguments\": {\"expr\": \"1\"}}</tool_call>";
    let h = Harness::single(&t, Script::new([bad, "42"]));
    let out = h.run(&t, 0, AgentConfig::default()).unwrap();
    let fb = out.state.messages.iter().find(|m| m.provenance == Provenance::Injected && m.role == Role::Tool).unwrap();
    assert!(fb.content.contains("`expression`"), "{}", fb.content);
    assert_eq!(out.buffer.len(), 2);
}

#[test]
fn tool_outside_toolset_is_recoverable() {
    let t = task(&[CALCULATOR]);
    let call = "<tool_call>{\"name\": \"kv_store\", \"arguments\": {\"key\": \"a\"}}</tool_call>";
    let h = Harness::single(&t, Script::new([call, "42"]));
    let out = h.run(&t, 0, AgentConfig::default()).unwrap();
    assert_eq!(out.state.termination.unwrap().kind, TerminationKind::TaskComplete);
    assert_eq!(out.state.fault_log[0].classification, FaultClass::Recoverable(RecoverableKind::InvalidParams));
}

#[test]
fn three_strikes_hint_then_fourth_escalates() {
    let t = task(&[CALCULATOR]);
    let h = Harness::single(&t, Script::looping(["<tool_call>{</tool_call>"]));
    let out = h.run(&t, 0, AgentConfig::default()).unwrap();
    assert_eq!(out.state.termination.as_ref().unwrap().kind, TerminationKind::UnrecoverableFault);
    assert!(!out.state.constraint_terminated);
    assert_eq!(out.buffer.len(), 4);
    assert!(out.state.hint_given(HintTrigger::RepeatedFailure));
    let kinds: Vec<_> = out.state.fault_log.iter().map(|f| f.classification).collect();
    assert_eq!(
        kinds,
        [
            FaultClass::Recoverable(RecoverableKind::ParseFailure),
            FaultClass::Recoverable(RecoverableKind::ParseFailure),
            FaultClass::Recoverable(RecoverableKind::ParseFailure),
            FaultClass::Escalated(RecoverableKind::ParseFailure),
        ]
    );
}

#[test]
fn summarizer_breaks_the_prefix() {
    let t = task(&[CALCULATOR, SUMMARIZE_HISTORY]);
    let summarize = "<tool_call>{\"name\": \"summarize_history\", \"arguments\": {}}</tool_call>";
    let h = Harness::single(&t, Script::new([calc("6*7"), summarize.into(), "42".into()]));
    let out = h.run(&t, 0, AgentConfig::default()).unwrap();
    let trs = out.buffer.transitions();
    assert_eq!(trs.len(), 3);
    let prev = [trs[1].input_ids.clone(), trs[1].output_ids.clone()].concat();
    assert!(!trs[2].input_ids.starts_with(&prev));
    assert_eq!(pack(trs).len(), 2);
}

#[test]
fn outage_fails_the_run() {
    let t = task(&[CALCULATOR]);
    let mut s = Script::new([calc("1+1"), "42".into()]);
    s.fail_at_turn = Some(1);
    let h = Harness::single(&t, s);
    let err = h.run(&t, 0, AgentConfig::default()).unwrap_err();
    assert!(matches!(err, RunError::Backend(BackendError::Unavailable(_))));
}

#[test]
fn outputs_cover_exactly_the_model_messages() {
    let t = task(&[CALCULATOR, KV_STORE]);
    let kv = "<tool_call>{\"name\": \"kv_store\", \"arguments\": {\"key\": \"x\", \"value\": \"42\"}}</tool_call>";
    let h = Harness::single(&t, Script::new([calc("6*7"), kv.into(), "42".into()]));
    let out = h.run(&t, 0, AgentConfig::default()).unwrap();
    let model: Vec<_> = out.state.messages.iter().filter(|m| m.provenance == Provenance::Model).collect();
    let trs = out.buffer.transitions();
    assert_eq!(model.len(), trs.len());
    for (m, tr) in model.iter().zip(trs) {
        assert_eq!(h.tokenizer.tokenize(&m.content), tr.output_ids);
    }
    assert_eq!(out.runtime.store["x"], "42");
}

#[test]
fn deterministic_across_runs() {
    let t = task(&[CALCULATOR]);
    let h = Harness::single(&t, Script::new([calc("1+2"), "bad <tool_call>".into(), "42".into()]));
    let a = h.run(&t, 0, AgentConfig::default()).unwrap();
    let b = h.run(&t, 0, AgentConfig::default()).unwrap();
    assert_eq!(a, b);
}
