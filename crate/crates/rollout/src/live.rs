//! Wall-clock dispatch: each started stage job runs on its own thread while
//! the scheduler state machine stays on the calling thread.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{mpsc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rollout_core::agent::{Action, AgentConfig, StepEnv};
use rollout_core::clock::Clock;
use rollout_core::dispatch::{Scheduler, Stage, StageJob, StageStatus};
use rollout_core::job::TrajectoryJob;
use rollout_core::registry::{Registry, TaskSpec};
use rollout_core::tool::Runtime;
use rollout_core::{GenerationBackend, Tokenizer, TrajectoryRunner};

/// Host monotonic clock.
#[derive(Debug, Clone, Copy)]
pub struct SystemClock(Instant);

impl SystemClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// Work behind each stage job. Called from many threads at once, never
/// twice concurrently for the same job.
pub trait LiveStages: Sync {
    fn run_stage(&self, job: usize, stage: Stage) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveReport {
    /// Stage records with times in microseconds since dispatch began.
    pub stages: Vec<[StageJob; 3]>,
    pub failures: BTreeMap<usize, (Stage, String)>,
    pub elapsed_us: u64,
    /// Queue depths sampled after every completion: (µs, depths).
    pub queue_depths: Vec<(u64, Vec<usize>)>,
    pub queue_names: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LiveError {
    #[error("scheduler stalled with {0} trajectories unfinished")]
    Stalled(usize),
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    match p.downcast::<String>() {
        Ok(s) => format!("stage panicked: {s}"),
        Err(p) => match p.downcast::<&str>() {
            Ok(s) => format!("stage panicked: {s}"),
            Err(_) => "stage panicked".into(),
        },
    }
}

/// Dispatches `n` trajectories. A stage that errors or panics fails its
/// trajectory (downstream stages are cancelled); the rest carry on.
pub fn dispatch_live(scheduler: &mut dyn Scheduler, stages: &dyn LiveStages, n: usize) -> Result<LiveReport, LiveError> {
    let origin = Instant::now();
    let us = || origin.elapsed().as_micros() as u64;
    let mut records: Vec<[StageJob; 3]> =
        (0..n).map(|j| Stage::ALL.map(|s| StageJob::queued(j, s))).collect();
    let mut failures = BTreeMap::new();
    let mut depths = Vec::new();
    let mut finished = 0;
    let mut in_flight = 0usize;
    let (tx, rx) = mpsc::channel::<(usize, Stage, Result<(), String>, u64)>();

    thread::scope(|scope| {
        while finished < n {
            while let Some((job, stage)) = scheduler.next_ready() {
                let rec = &mut records[job][stage.index()];
                rec.status = StageStatus::Running;
                rec.start_time = Some(us());
                in_flight += 1;
                let tx = tx.clone();
                scope.spawn(move || {
                    let r = catch_unwind(AssertUnwindSafe(|| stages.run_stage(job, stage)))
                        .unwrap_or_else(|p| Err(panic_message(p)));
                    let _ = tx.send((job, stage, r, origin.elapsed().as_micros() as u64));
                });
            }
            if in_flight == 0 {
                return Err(LiveError::Stalled(n - finished));
            }
            let (job, stage, result, end) = rx.recv().expect("a worker still holds a sender");
            in_flight -= 1;
            let ok = result.is_ok();
            let rec = &mut records[job][stage.index()];
            rec.end_time = Some(end);
            match result {
                Ok(()) => {
                    rec.status = StageStatus::Done;
                    if stage == Stage::Eval {
                        finished += 1;
                    }
                }
                Err(reason) => {
                    rec.status = StageStatus::Failed;
                    for later in &mut records[job][stage.index() + 1..] {
                        later.status = StageStatus::Cancelled;
                    }
                    failures.insert(job, (stage, reason));
                    finished += 1;
                }
            }
            scheduler.complete(job, stage, ok);
            depths.push((us(), scheduler.queue_depths()));
        }
        Ok(())
    })?;

    Ok(LiveReport {
        stages: records,
        failures,
        elapsed_us: us(),
        queue_depths: depths,
        queue_names: scheduler.queue_names(),
    })
}

struct Slot {
    job: TrajectoryJob,
    runtime: Option<Runtime>,
}

/// Runs real agent trajectories against a live backend.
pub struct LiveAgentExecutor<'a> {
    registry: &'a Registry,
    tokenizer: &'a Tokenizer,
    backend: &'a dyn GenerationBackend,
    tasks: &'a [TaskSpec],
    config: AgentConfig,
    clock: SystemClock,
    verify_deadline: Duration,
    slots: Vec<Mutex<Slot>>,
}

impl<'a> LiveAgentExecutor<'a> {
    pub fn new(
        registry: &'a Registry,
        tokenizer: &'a Tokenizer,
        backend: &'a dyn GenerationBackend,
        tasks: &'a [TaskSpec],
        config: AgentConfig,
        jobs: Vec<TrajectoryJob>,
    ) -> Self {
        Self {
            registry,
            tokenizer,
            backend,
            tasks,
            config,
            clock: SystemClock::start(),
            verify_deadline: Duration::from_secs(60),
            slots: jobs.into_iter().map(|job| Mutex::new(Slot { job, runtime: None })).collect(),
        }
    }

    pub fn into_jobs(self) -> Vec<TrajectoryJob> {
        self.slots.into_iter().map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).job).collect()
    }

    fn run(&self, slot: &mut Slot) -> Result<(), String> {
        let task = &self.tasks[slot.job.task_idx];
        let runtime = slot.runtime.take().unwrap_or_default();
        let mut runner = TrajectoryRunner::new(
            self.registry,
            self.tokenizer,
            task,
            slot.job.traj_idx,
            slot.job.rollout,
            runtime,
            self.config,
        )
        .map_err(|e| e.to_string())?;
        let env = StepEnv { backend: self.backend, clock: &self.clock, tool_latency: None };
        let result = loop {
            match runner.step(&env) {
                Ok(Action::Finished) => break Ok(()),
                Ok(_) => {}
                Err(e) => break Err(e.to_string()),
            }
        };
        slot.job.metrics = runner.metrics();
        let (state, runtime, buffer) = runner.into_parts();
        slot.job.state = Some(state);
        slot.job.transitions = buffer.into_transitions();
        slot.runtime = Some(runtime);
        result
    }
}

impl LiveStages for LiveAgentExecutor<'_> {
    fn run_stage(&self, job: usize, stage: Stage) -> Result<(), String> {
        let mut slot = self.slots[job].lock().unwrap_or_else(|e| e.into_inner());
        let task = &self.tasks[slot.job.task_idx];
        let r = match stage {
            Stage::Init => self.registry.validate_task(task).map_err(|e| e.to_string()).map(|()| {
                slot.runtime = Some(Runtime::from_payload(&task.payload));
            }),
            Stage::Run => self.run(&mut slot),
            Stage::Eval => {
                let runtime = slot.runtime.take().unwrap_or_default();
                let state = slot.job.state.clone().unwrap_or_default();
                let outcome = self.registry.verify(task, &state, &runtime, &self.clock, self.verify_deadline);
                slot.job.reward = Some(outcome.reward);
                slot.job.verify_failure = outcome.failure;
                Ok(())
            }
        };
        if let Err(reason) = &r {
            slot.job.failure.get_or_insert_with(|| reason.clone());
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rollout_core::dispatch::{BatchScheduler, PipelineScheduler};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        running: AtomicUsize,
        peak: AtomicUsize,
        fail_job: usize,
    }

    impl LiveStages for Counting {
        fn run_stage(&self, job: usize, stage: Stage) -> Result<(), String> {
            let now = self.running.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(2));
            self.running.fetch_sub(1, Ordering::SeqCst);
            if job == self.fail_job && stage == Stage::Run {
                panic!("boom");
            }
            Ok(())
        }
    }

    #[test]
    fn bounded_pool_caps_concurrency_and_isolates_panics() {
        let stages = Counting { running: AtomicUsize::new(0), peak: AtomicUsize::new(0), fail_job: 3 };
        let mut s = BatchScheduler::new(0..10, Some(2));
        let r = dispatch_live(&mut s, &stages, 10).unwrap();
        assert!(stages.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.stages[3][2].status, StageStatus::Cancelled);
        assert!(r.failures[&3].1.contains("boom"));
        assert!(r.stages.iter().enumerate().all(|(j, s)| j == 3 || s.iter().all(|x| x.status == StageStatus::Done)));
    }

    #[test]
    fn pipeline_completes_everything() {
        let stages = Counting { running: AtomicUsize::new(0), peak: AtomicUsize::new(0), fail_job: usize::MAX };
        let mut s = PipelineScheduler::new(0..12, [2, 2, 2], [1, 2, 1]);
        let r = dispatch_live(&mut s, &stages, 12).unwrap();
        assert!(stages.peak.load(Ordering::SeqCst) <= 4);
        for s in &r.stages {
            assert!(s[0].end_time <= s[1].start_time && s[1].end_time <= s[2].start_time);
        }
    }
}
