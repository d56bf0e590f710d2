#![allow(dead_code)]

use std::sync::Arc;

use rollout_core::agent::{run_trajectory, AgentConfig, RunError, RunOutcome, StepEnv};
use rollout_core::backend::{Script, ScriptedBackend, ScriptedPolicy};
use rollout_core::clock::FrozenClock;
use rollout_core::message::template_literals;
use rollout_core::registry::{Registry, RegistryBuilder, TaskSpec};
use rollout_core::tool::Runtime;
use rollout_core::{Tokenizer, TrajectoryRunner};

pub struct Harness {
    pub registry: Registry,
    pub tokenizer: Arc<Tokenizer>,
    pub backend: ScriptedBackend,
}

impl Harness {
    pub fn new(tasks: &[TaskSpec], policy: ScriptedPolicy) -> Self {
        let registry = RegistryBuilder::with_builtins().freeze();
        let mut corpus = template_literals();
        corpus.extend(policy.texts().map(String::from));
        for t in tasks {
            corpus.extend(registry.build_instruction(t).unwrap().into_iter().map(|m| m.content));
        }
        let tokenizer = Arc::new(Tokenizer::from_corpus(corpus));
        let backend = ScriptedBackend::new(policy, tokenizer.clone());
        Self { registry, tokenizer, backend }
    }

    /// One task with one script.
    pub fn single(task: &TaskSpec, script: Script) -> Self {
        let mut p = ScriptedPolicy { emit_logprobs: true, ..Default::default() };
        p.insert(&task.task_id, script);
        Self::new(std::slice::from_ref(task), p)
    }

    pub fn run(&self, task: &TaskSpec, rollout: u32, config: AgentConfig) -> Result<RunOutcome, RunError> {
        let runner = TrajectoryRunner::new(
            &self.registry,
            &self.tokenizer,
            task,
            0,
            rollout,
            Runtime::from_payload(&task.payload),
            config,
        )
        .expect("task validates");
        let env = StepEnv { backend: &self.backend, clock: &FrozenClock, tool_latency: None };
        run_trajectory(runner, &env)
    }
}

pub fn calc(expr: &str) -> String {
    format!("<tool_call>{{\"name\": \"calculator\", \"arguments\": {{\"expression\": \"{expr}\"}}}}</tool_call>")
}
