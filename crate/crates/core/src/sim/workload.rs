//! Synthetic scripted workloads and the simulated dispatch entry point.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::trace::DEFAULT_STRAGGLERS;
use super::{simulate, AgentExecutor, CostProfile, Dist, ResourceModel, ScheduleMetrics, SimReport};
use crate::agent::{hint_text, AgentConfig, HintTrigger, CALL_CLOSE, CALL_OPEN};
use crate::backend::{Script, ScriptedBackend, ScriptedPolicy};
use crate::builtin::{CALCULATOR, KV_STORE, SUMMARIZE_HISTORY};
use crate::dispatch::{DispatchError, DispatchPolicy, DispatcherRegistry, JobMeta, ScheduleContext};
use crate::job::{assemble_batch, new_jobs, TrajectoryJob};
use crate::message::template_literals;
use crate::recorder::{BatchRecord, PostProcessError};
use crate::registry::{Registry, TaskSpec};
use crate::tokenizer::Tokenizer;
use crate::mix64;

/// Shape of generated scripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub tasks: u32,
    pub rollouts_per_task: u32,
    /// Inclusive range of tool-calling turns before the answer.
    pub tool_calls: [u32; 2],
    /// Inclusive range of free-text words per tool-calling turn.
    pub output_tokens: [u32; 2],
    /// Fraction of rollouts whose final answer is right.
    pub correct_rate: f64,
    /// Per-turn chance of a malformed call block.
    pub parse_fault_rate: f64,
    /// Per-turn chance of a call with a bad argument.
    pub param_fault_rate: f64,
    /// Per-turn chance of calling the history summarizer.
    pub summarize_rate: f64,
    /// Per-turn chance of a key-value store call.
    pub kv_rate: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            tasks: 2,
            rollouts_per_task: 1,
            tool_calls: [1, 3],
            output_tokens: [4, 12],
            correct_rate: 0.5,
            parse_fault_rate: 0.0,
            param_fault_rate: 0.0,
            summarize_rate: 0.0,
            kv_rate: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("unknown cost estimator `{0}`")]
    UnknownEstimator(String),
    #[error("invalid workload: {0}")]
    Invalid(String),
}

struct Draw(ChaCha8Rng);

impl Draw {
    fn new(seed: u64, salt: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(salt))))
    }

    fn range(&mut self, [lo, hi]: [u32; 2]) -> u32 {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        lo + (self.0.next_u64() % (hi - lo + 1) as u64) as u32
    }

    fn chance(&mut self, p: f64) -> bool {
        ((self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64) < p
    }
}

fn call(name: &str, args: Value) -> String {
    format!("{CALL_OPEN}{}{CALL_CLOSE}", json!({"name": name, "arguments": args}))
}

impl WorkloadSpec {
    /// Task list plus one script per rollout, all derived from `seed`.
    pub fn generate(&self, seed: u64) -> (Vec<TaskSpec>, ScriptedPolicy) {
        let mut tasks = Vec::new();
        let mut scripts = ScriptedPolicy { emit_logprobs: true, ..Default::default() };
        for t in 0..self.tasks {
            let mut d = Draw::new(seed, t as u64);
            let (a, b) = (d.range([2, 999]), d.range([2, 999]));
            let id = format!("task-{t:03}");
            let payload = json!({
                "prompt": format!("Compute {a} + {b} and reply with the number only."),
                "answer": (a + b).to_string(),
            });
            tasks.push(TaskSpec::new(&id, &[CALCULATOR, KV_STORE, SUMMARIZE_HISTORY], payload));
            for r in 0..self.rollouts_per_task {
                let mut d = Draw::new(seed, ((t as u64) << 32) | (r as u64 + 1));
                let mut turns = Vec::new();
                for k in 0..d.range(self.tool_calls) {
                    let words = d.range(self.output_tokens);
                    let mut text = String::new();
                    for _ in 0..words {
                        text.push_str(&format!("w{} ", d.range([0, 511])));
                    }
                    let action = if d.chance(self.parse_fault_rate) {
                        format!("{CALL_OPEN}{{\"name\": \"{CALCULATOR}\", \"arguments\": {CALL_CLOSE}")
                    } else if d.chance(self.param_fault_rate) {
                        call(CALCULATOR, json!({"expr": format!("{a}+{b}")}))
                    } else if d.chance(self.summarize_rate) {
                        call(SUMMARIZE_HISTORY, json!({}))
                    } else if d.chance(self.kv_rate) {
                        call(KV_STORE, json!({"key": format!("k{}", k % 3), "value": format!("{}", d.range([0, 99]))}))
                    } else {
                        call(CALCULATOR, json!({"expression": format!("{}*{}+{}", d.range([1, 99]), d.range([1, 99]), k)}))
                    };
                    text.push_str(&action);
                    turns.push(text);
                }
                let answer = if d.chance(self.correct_rate) { a + b } else { a + b + 1 };
                turns.push(answer.to_string());
                scripts.insert(&id, Script::new(turns));
            }
        }
        (tasks, scripts)
    }
}

/// Everything a simulated batch needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedWorkload {
    pub tasks: Vec<TaskSpec>,
    pub rollouts_per_task: u32,
    pub scripts: ScriptedPolicy,
    pub profile: CostProfile,
    pub resources: ResourceModel,
    pub agent: AgentConfig,
    pub seed: u64,
}

impl SimulatedWorkload {
    pub fn generate(spec: &WorkloadSpec, profile: CostProfile, resources: ResourceModel, seed: u64) -> Self {
        let (tasks, scripts) = spec.generate(seed);
        Self {
            tasks,
            rollouts_per_task: spec.rollouts_per_task,
            scripts,
            profile,
            resources,
            agent: AgentConfig::default(),
            seed,
        }
    }

    /// 64 tasks × 8 rollouts on 16 GPU slots and 16 CPU workers, one time
    /// unit standing for one second. Init plus eval is roughly a third of an
    /// uncontended trajectory.
    pub fn calibrated() -> Self {
        let spec = WorkloadSpec {
            tasks: 64,
            rollouts_per_task: 8,
            tool_calls: [6, 6],
            output_tokens: [200, 400],
            ..WorkloadSpec::default()
        };
        Self::generate(&spec, calibrated_profile(), ResourceModel::new(16, 16), 7)
    }

    pub fn trajectories(&self) -> usize {
        self.tasks.len() * self.rollouts_per_task as usize
    }

    /// Vocabulary over every text the batch is expected to produce verbatim.
    pub fn tokenizer(&self, registry: &Registry) -> Tokenizer {
        let mut corpus: Vec<String> = template_literals();
        corpus.extend(self.scripts.texts().map(String::from));
        for t in &self.tasks {
            if let Ok(msgs) = registry.build_instruction(t) {
                corpus.extend(msgs.into_iter().map(|m| m.content));
            }
        }
        corpus.push(hint_text(HintTrigger::RepeatedFailure, 0));
        Tokenizer::from_corpus(corpus)
    }

    pub fn job_metas(&self, key: &str) -> Result<Vec<JobMeta>, WorkloadError> {
        crate::job::plan(&self.tasks, self.rollouts_per_task)
            .into_iter()
            .map(|(t, _)| {
                let task = &self.tasks[t];
                Ok(JobMeta { task_id: task.task_id.clone(), cost: estimate_cost(key, task, Some(&self.profile))? })
            })
            .collect()
    }
}

/// Cost profile of [`SimulatedWorkload::calibrated`].
pub fn calibrated_profile() -> CostProfile {
    CostProfile {
        time_unit_ms: 1000,
        init_cost: Dist::Uniform { lo: 18, hi: 34 },
        eval_cost: Dist::Uniform { lo: 16, hi: 28 },
        default_tool_cost: Dist::Uniform { lo: 1, hi: 2 },
        prefill_per_token: 0.002,
        decode_per_token: 0.04,
        ..CostProfile::default()
    }
}

/// Admission-slot and pipeline settings used with the calibrated profile.
pub fn calibrated_policies() -> (DispatchPolicy, DispatchPolicy) {
    (DispatchPolicy::bounded(16), DispatchPolicy::pipeline([8, 16, 8], [8, 18, 8]))
}

/// Named estimate of a trajectory's cost, for priority admission.
///
/// `eval_cost` is the task's mean modelled eval cost (or `payload.eval_cost`
/// without a profile); `num_tests` counts `payload.tests` or reads
/// `payload.num_tests`.
pub fn estimate_cost(key: &str, task: &TaskSpec, profile: Option<&CostProfile>) -> Result<f64, WorkloadError> {
    let p = &task.payload;
    match key {
        "eval_cost" => Ok(match profile {
            Some(prof) => prof.eval_dist(&task.task_id).mean(),
            None => p.get("eval_cost").and_then(Value::as_f64).unwrap_or(0.0),
        }),
        "num_tests" => Ok(match p.get("tests") {
            Some(Value::Array(a)) => a.len() as f64,
            _ => p.get("num_tests").and_then(Value::as_f64).unwrap_or(0.0),
        }),
        other => Err(WorkloadError::UnknownEstimator(other.into())),
    }
}

/// Outcome of one simulated dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub jobs: Vec<TrajectoryJob>,
    pub report: SimReport,
    pub metrics: ScheduleMetrics,
}

impl SimRun {
    pub fn batch(&self) -> Result<BatchRecord, PostProcessError> {
        assemble_batch(&self.jobs)
    }
}

/// Runs the workload under the named dispatcher in virtual time.
pub fn run_simulated(
    workload: &SimulatedWorkload,
    registry: &Registry,
    tokenizer: &Arc<Tokenizer>,
    dispatchers: &DispatcherRegistry,
    name: &str,
    policy: &DispatchPolicy,
) -> Result<SimRun, WorkloadError> {
    workload.resources.validate().map_err(WorkloadError::Invalid)?;
    workload.profile.validate().map_err(|e| WorkloadError::Invalid(e.join("; ")))?;
    let metas = workload.job_metas(&policy.priority_key)?;
    let cx = ScheduleContext { jobs: &metas, gpu_slots: workload.resources.gpu_slots };
    let mut scheduler = dispatchers.build(name, policy, &cx)?;
    let backend = ScriptedBackend::new(workload.scripts.clone(), tokenizer.clone());
    let jobs = new_jobs(&workload.tasks, workload.rollouts_per_task);
    let n = jobs.len();
    let mut exec = AgentExecutor::new(
        registry,
        tokenizer,
        &backend,
        &workload.tasks,
        &workload.profile,
        workload.agent,
        workload.seed,
        jobs,
    );
    let report = simulate(scheduler.as_mut(), &mut exec, n, workload.resources);
    let mut jobs = exec.into_jobs();
    for (j, stages) in jobs.iter_mut().zip(&report.stages) {
        j.stages = *stages;
        if let Some((_, reason)) = report.failures.get(&j.traj_idx) {
            j.failure.get_or_insert_with(|| reason.clone());
        }
    }
    let metrics = ScheduleMetrics::from_report(&report, DEFAULT_STRAGGLERS);
    Ok(SimRun { jobs, report, metrics })
}
