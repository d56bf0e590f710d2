use std::sync::Arc;
use std::time::Duration;

use rollout_core::agent::TrajectoryState;
use rollout_core::builtin::{calculator_spec, CALCULATOR, KV_STORE, SUMMARIZE_HISTORY};
use rollout_core::clock::{Clock, FrozenClock, ManualClock};
use rollout_core::message::{Message, Provenance, Role, ToolCall};
use rollout_core::registry::{InvokeError, InvokeOptions, RegistryBuilder, RegistryError, TaskSpec, Verifier};
use rollout_core::tool::{Runtime, RuntimeClass, ToolOutput, ToolSpec, ToolStatus};
use serde_json::{json, Map, Value};

fn call(tool: &str, args: Value) -> ToolCall {
    let Value::Object(arguments) = args else { panic!("arguments must be an object") };
    ToolCall { call_id: "c0".into(), tool_name: tool.into(), arguments }
}

fn opts(clock: &dyn Clock) -> InvokeOptions<'_> {
    InvokeOptions { clock, simulated_latency: None }
}

fn echo(_: &Map<String, Value>, _: &mut rollout_core::tool::ToolContext<'_>) -> Result<ToolOutput, String> {
    Ok(ToolOutput::text("ok"))
}

#[test]
fn registration_grows_and_rejects_duplicates() {
    let mut b = RegistryBuilder::new();
    b.register_tool(calculator_spec(), echo).unwrap();
    assert_eq!(b.len(), 1);
    let err = b.register_tool(calculator_spec(), echo).unwrap_err();
    assert_eq!(err, RegistryError::DuplicateName(CALCULATOR.into()));
    assert_eq!(b.len(), 1);
}

#[test]
fn schema_without_object_type_is_rejected() {
    let mut b = RegistryBuilder::new();
    let spec = ToolSpec::new("bad", "d", json!({"properties": {}}), RuntimeClass::Stateless);
    assert!(matches!(b.register_tool(spec, echo), Err(RegistryError::InvalidSchema { .. })));
    let spec = ToolSpec::new("bad", "d", json!({"type": "array"}), RuntimeClass::Stateless);
    assert!(matches!(b.register_tool(spec, echo), Err(RegistryError::InvalidSchema { .. })));
    assert!(b.is_empty());
}

#[test]
fn calculator_adds() {
    let reg = RegistryBuilder::with_builtins().freeze();
    let mut rt = Runtime::new();
    let r = reg.invoke_tool(&call(CALCULATOR, json!({"expression": "2+3"})), &mut rt, &[], opts(&FrozenClock)).unwrap();
    assert_eq!(r.status, ToolStatus::Ok);
    assert_eq!(r.content, "5");
    assert_eq!(rt, Runtime::new());
}

#[test]
fn kv_store_last_write_wins() {
    let reg = RegistryBuilder::with_builtins().freeze();
    let mut rt = Runtime::new();
    let w = call(KV_STORE, json!({"key": "a", "value": "1"}));
    reg.invoke_tool(&w, &mut rt, &[], opts(&FrozenClock)).unwrap();
    reg.invoke_tool(&w, &mut rt, &[], opts(&FrozenClock)).unwrap();
    let r = reg.invoke_tool(&call(KV_STORE, json!({"key": "a"})), &mut rt, &[], opts(&FrozenClock)).unwrap();
    assert_eq!(r.status, ToolStatus::Ok);
    assert_eq!(r.content, "1");
    assert_eq!(rt.store.get("a").map(String::as_str), Some("1"));
}

#[test]
fn summarizer_returns_state_patch_and_others_do_not() {
    let reg = RegistryBuilder::with_builtins().freeze();
    let history = vec![
        Message::system("sys"),
        Message::user("question"),
        Message::new(Role::Assistant, "thinking", Provenance::Model),
    ];
    let mut rt = Runtime::new();
    let r = reg.invoke_tool(&call(SUMMARIZE_HISTORY, json!({})), &mut rt, &history, opts(&FrozenClock)).unwrap();
    assert_eq!(r.status, ToolStatus::Ok);
    let patch = r.state_patch.expect("agent-state tool patches history");
    assert_ne!(patch, history);
    let r = reg.invoke_tool(&call(CALCULATOR, json!({"expression": "1"})), &mut rt, &history, opts(&FrozenClock)).unwrap();
    assert!(r.state_patch.is_none());
}

#[test]
fn illegal_patch_from_stateless_tool() {
    let mut b = RegistryBuilder::new();
    let spec = ToolSpec::new("liar", "d", json!({"type": "object"}), RuntimeClass::Stateless);
    b.register_tool(spec, |_: &Map<String, Value>, _: &mut rollout_core::tool::ToolContext<'_>| {
        Ok(ToolOutput { content: "x".into(), state_patch: Some(vec![]) })
    })
    .unwrap();
    let reg = b.freeze();
    let err = reg.invoke_tool(&call("liar", json!({})), &mut Runtime::new(), &[], opts(&FrozenClock)).unwrap_err();
    assert_eq!(err, InvokeError::IllegalStatePatch("liar".into()));
}

#[test]
fn unknown_tool_and_bad_arguments() {
    let reg = RegistryBuilder::with_builtins().freeze();
    let mut rt = Runtime::new();
    let e = reg.invoke_tool(&call("nope", json!({})), &mut rt, &[], opts(&FrozenClock)).unwrap_err();
    assert_eq!(e, InvokeError::UnknownTool("nope".into()));
    let e = reg.invoke_tool(&call(CALCULATOR, json!({"expr": "1"})), &mut rt, &[], opts(&FrozenClock)).unwrap_err();
    let InvokeError::InvalidArguments { source, .. } = e else { panic!("{e:?}") };
    assert_eq!(source.param, "expression");
}

#[test]
fn slow_tool_times_out() {
    let clock = Arc::new(ManualClock::default());
    let c2 = clock.clone();
    let mut b = RegistryBuilder::new();
    let spec = ToolSpec::new("slow", "d", json!({"type": "object"}), RuntimeClass::Stateless)
        .with_timeout(Duration::from_secs(1));
    b.register_tool(spec, move |_: &Map<String, Value>, _: &mut rollout_core::tool::ToolContext<'_>| {
        c2.advance(Duration::from_secs(2));
        Ok(ToolOutput::text("late"))
    })
    .unwrap();
    let reg = b.freeze();
    let r = reg.invoke_tool(&call("slow", json!({})), &mut Runtime::new(), &[], opts(clock.as_ref())).unwrap();
    assert_eq!(r.status, ToolStatus::Timeout);
    assert!(!r.content.is_empty());

    let r = reg
        .invoke_tool(
            &call("slow", json!({})),
            &mut Runtime::new(),
            &[],
            InvokeOptions { clock: &FrozenClock, simulated_latency: Some(Duration::from_secs(5)) },
        )
        .unwrap();
    assert_eq!(r.status, ToolStatus::Timeout);
}

#[test]
fn instruction_lists_each_tool_once_and_is_deterministic() {
    let reg = RegistryBuilder::with_builtins().freeze();
    let task = TaskSpec::new("t", &[CALCULATOR, KV_STORE], json!({"prompt": "go"}));
    let a = reg.build_instruction(&task).unwrap();
    let b = reg.build_instruction(&task).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let system = &a[0].content;
    for name in [CALCULATOR, KV_STORE] {
        assert_eq!(system.matches(&format!("\"name\":\"{name}\"")).count(), 1, "{name}");
    }
    assert!(!system.contains(SUMMARIZE_HISTORY));
    assert_eq!(a[0].role, Role::System);
    assert_eq!(a[1].role, Role::User);
}

#[test]
fn empty_toolset_is_legal() {
    let reg = RegistryBuilder::with_builtins().freeze();
    let task = TaskSpec::new("t", &[], json!({"prompt": "go"}));
    let msgs = reg.build_instruction(&task).unwrap();
    assert!(msgs[0].content.contains("Tools: []"));
}

#[test]
fn exact_match_rewards() {
    let reg = RegistryBuilder::with_builtins().freeze();
    let task = TaskSpec::new("t", &[], json!({"answer": "42"}));
    let mut state = TrajectoryState { answer: Some("42".into()), ..Default::default() };
    state.terminate(rollout_core::agent::TerminationReason {
        kind: rollout_core::agent::TerminationKind::TaskComplete,
        detail: String::new(),
    });
    let d = Duration::from_secs(60);
    assert_eq!(reg.verify(&task, &state, &Runtime::new(), &FrozenClock, d).reward, 1.0);
    state.answer = Some("41".into());
    let out = reg.verify(&task, &state, &Runtime::new(), &FrozenClock, d);
    assert_eq!(out.reward, 0.0);
    assert!(out.failure.is_none());
}

struct Sleepy(Arc<ManualClock>);

impl Verifier for Sleepy {
    fn verify(&self, _: &TaskSpec, _: &TrajectoryState, _: &Runtime) -> Result<f64, String> {
        self.0.advance(Duration::from_secs(5));
        Ok(1.0)
    }
}

#[test]
fn verifier_past_deadline_scores_zero_with_flag() {
    let clock = Arc::new(ManualClock::default());
    let mut b = RegistryBuilder::with_builtins();
    b.register_verifier("sleepy", Sleepy(clock.clone())).unwrap();
    let reg = b.freeze();
    let mut task = TaskSpec::new("t", &[], json!({}));
    task.verifier = "sleepy".into();
    let out = reg.verify(&task, &TrajectoryState::default(), &Runtime::new(), clock.as_ref(), Duration::from_secs(1));
    assert_eq!(out.reward, 0.0);
    assert!(out.failure.unwrap().contains("deadline"));
}

#[test]
fn toolset_must_resolve() {
    let reg = RegistryBuilder::with_builtins().freeze();
    assert!(reg.validate_task(&TaskSpec::new("t", &["ghost"], json!({}))).is_err());
    let mut t = TaskSpec::new("t", &[], json!({}));
    t.max_steps = 0;
    assert!(reg.validate_task(&t).is_err());
}
