use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::time::Duration;

use super::{CostProfile, Purpose, Resource, StageExecutor, StageStep};
use crate::agent::{Action, AgentConfig, StepEnv, ToolLatency, TrajectoryRunner};
use crate::backend::GenerationBackend;
use crate::clock::FrozenClock;
use crate::dispatch::Stage;
use crate::job::TrajectoryJob;
use crate::registry::{Registry, TaskSpec};
use crate::tokenizer::Tokenizer;
use crate::tool::{Runtime, RuntimeClass};

/// One fixed resource demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub resource: Resource,
    pub duration: u64,
}

impl Segment {
    pub fn cpu(duration: u64) -> Self {
        Self { resource: Resource::Cpu, duration }
    }

    pub fn gpu(duration: u64) -> Self {
        Self { resource: Resource::Gpu, duration }
    }
}

/// Replays fixed demand lists; the workload of pure scheduling tests.
#[derive(Debug, Clone)]
pub struct SegmentExecutor {
    plans: Vec<[Vec<Segment>; 3]>,
    cursor: Vec<[usize; 3]>,
}

impl SegmentExecutor {
    pub fn new(plans: Vec<[Vec<Segment>; 3]>) -> Self {
        let cursor = vec![[0; 3]; plans.len()];
        Self { plans, cursor }
    }

    /// `jobs` identical trajectories: CPU init, the given run segments, CPU eval.
    pub fn uniform(jobs: usize, init: u64, run: Vec<Segment>, eval: u64) -> Self {
        Self::new((0..jobs).map(|_| [vec![Segment::cpu(init)], run.clone(), vec![Segment::cpu(eval)]]).collect())
    }

    pub fn plans(&self) -> &[[Vec<Segment>; 3]] {
        &self.plans
    }
}

impl StageExecutor for SegmentExecutor {
    fn step(&mut self, job: usize, stage: Stage, _now: u64) -> StageStep {
        let i = &mut self.cursor[job][stage.index()];
        match self.plans[job][stage.index()].get(*i) {
            Some(seg) => {
                *i += 1;
                StageStep::Demand(seg.resource, seg.duration)
            }
            None => StageStep::Done,
        }
    }
}

struct Latency<'p> {
    profile: &'p CostProfile,
    task_id: &'p str,
    seed: u64,
    traj: usize,
}

impl ToolLatency for Latency<'_> {
    fn latency(&self, tool: &str, _class: RuntimeClass, seq: u32) -> Duration {
        let d = self.profile.tool_dist(self.task_id, tool);
        let units = CostProfile::draw(d, self.seed, self.traj, Purpose::Tool, seq as u64);
        self.profile.time_unit() * units as u32
    }
}

#[derive(Default)]
struct Slot<'a> {
    charged: bool,
    runtime: Option<Runtime>,
    runner: Option<TrajectoryRunner<'a>>,
}

/// Runs real agent trajectories, charging each action to a resource.
pub struct AgentExecutor<'a> {
    registry: &'a Registry,
    tokenizer: &'a Tokenizer,
    backend: &'a dyn GenerationBackend,
    tasks: &'a [TaskSpec],
    profile: &'a CostProfile,
    config: AgentConfig,
    seed: u64,
    verify_deadline: Duration,
    jobs: Vec<TrajectoryJob>,
    slots: Vec<Slot<'a>>,
}

impl<'a> AgentExecutor<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        registry: &'a Registry,
        tokenizer: &'a Tokenizer,
        backend: &'a dyn GenerationBackend,
        tasks: &'a [TaskSpec],
        profile: &'a CostProfile,
        config: AgentConfig,
        seed: u64,
        jobs: Vec<TrajectoryJob>,
    ) -> Self {
        let slots = jobs.iter().map(|_| Slot::default()).collect();
        Self {
            registry,
            tokenizer,
            backend,
            tasks,
            profile,
            config,
            seed,
            verify_deadline: Duration::from_secs(60),
            jobs,
            slots,
        }
    }

    pub fn with_verify_deadline(mut self, d: Duration) -> Self {
        self.verify_deadline = d;
        self
    }

    pub fn into_jobs(self) -> Vec<TrajectoryJob> {
        self.jobs
    }

    fn init(&mut self, job: usize) -> StageStep {
        let j = &self.jobs[job];
        let task = &self.tasks[j.task_idx];
        let slot = &mut self.slots[job];
        if slot.charged {
            slot.charged = false;
            return StageStep::Done;
        }
        if let Err(e) = self.registry.validate_task(task) {
            return StageStep::Failed(e.to_string());
        }
        slot.runtime = Some(Runtime::from_payload(&task.payload));
        slot.charged = true;
        let (dist, purpose) = if self.profile.reuse_runtime && j.rollout > 0 {
            (self.profile.reset_cost, Purpose::Reset)
        } else {
            (self.profile.init_dist(&task.task_id), Purpose::Init)
        };
        StageStep::Demand(Resource::Cpu, CostProfile::draw(dist, self.seed, j.traj_idx, purpose, 0))
    }

    fn run(&mut self, job: usize) -> StageStep {
        let (task_idx, traj, rollout) = {
            let j = &self.jobs[job];
            (j.task_idx, j.traj_idx, j.rollout)
        };
        let tasks: &'a [TaskSpec] = self.tasks;
        let task = &tasks[task_idx];
        let slot = &mut self.slots[job];
        if slot.runner.is_none() {
            let runtime = slot.runtime.take().unwrap_or_default();
            match TrajectoryRunner::new(self.registry, self.tokenizer, task, traj, rollout, runtime, self.config) {
                Ok(r) => slot.runner = Some(r),
                Err(e) => return StageStep::Failed(e.to_string()),
            }
        }
        let runner = slot.runner.as_mut().expect("runner was just created");
        let latency = Latency { profile: self.profile, task_id: &task.task_id, seed: self.seed, traj };
        let env = StepEnv { backend: self.backend, clock: &FrozenClock, tool_latency: Some(&latency) };
        loop {
            match runner.step(&env) {
                Ok(Action::Generated { input_tokens, output_tokens }) => {
                    return StageStep::Demand(Resource::Gpu, self.profile.generation_cost(input_tokens, output_tokens));
                }
                Ok(Action::ToolExecuted { charged: Some(d), .. }) => {
                    return StageStep::Demand(Resource::Cpu, self.profile.units(d));
                }
                Ok(Action::ToolExecuted { charged: None, .. }) => continue,
                Ok(Action::Finished) => {
                    let runner = slot.runner.take().expect("runner present");
                    let j = &mut self.jobs[job];
                    j.metrics = runner.metrics();
                    let (state, runtime, buffer) = runner.into_parts();
                    j.state = Some(state);
                    j.transitions = buffer.into_transitions();
                    slot.runtime = Some(runtime);
                    return StageStep::Done;
                }
                Err(e) => {
                    let runner = slot.runner.take().expect("runner present");
                    let j = &mut self.jobs[job];
                    j.metrics = runner.metrics();
                    let (state, _, buffer) = runner.into_parts();
                    j.state = Some(state);
                    j.transitions = buffer.into_transitions();
                    return StageStep::Failed(e.to_string());
                }
            }
        }
    }

    fn eval(&mut self, job: usize) -> StageStep {
        let slot = &mut self.slots[job];
        if slot.charged {
            slot.charged = false;
            return StageStep::Done;
        }
        let j = &mut self.jobs[job];
        let task = &self.tasks[j.task_idx];
        let runtime = slot.runtime.take().unwrap_or_default();
        let state = j.state.clone().unwrap_or_default();
        let outcome = self.registry.verify(task, &state, &runtime, &FrozenClock, self.verify_deadline);
        j.reward = Some(outcome.reward);
        j.verify_failure = outcome.failure;
        slot.charged = true;
        let d = self.profile.eval_dist(&task.task_id);
        StageStep::Demand(Resource::Cpu, CostProfile::draw(d, self.seed, j.traj_idx, Purpose::Eval, 0))
    }
}

impl StageExecutor for AgentExecutor<'_> {
    fn step(&mut self, job: usize, stage: Stage, _now: u64) -> StageStep {
        let step = match stage {
            Stage::Init => self.init(job),
            Stage::Run => self.run(job),
            Stage::Eval => self.eval(job),
        };
        if let StageStep::Failed(reason) = &step {
            self.jobs[job].failure.get_or_insert_with(|| reason.clone());
        }
        step
    }

    fn granted(&mut self, job: usize, stage: Stage, resource: Resource, start: u64, end: u64) {
        if stage == Stage::Run && resource == Resource::Gpu {
            if let Some(r) = self.slots[job].runner.as_mut() {
                let us = self.profile.time_unit_ms * 1000;
                r.buffer_mut().stamp_last(start * us, end * us);
            }
        }
    }
}
