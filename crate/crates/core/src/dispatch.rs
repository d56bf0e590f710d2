//! Stage dispatch policies.
//!
//! A [`Scheduler`] decides which stage job may start next. It never runs
//! anything itself: the virtual-time simulator and the live runner both pull
//! ready stage jobs from it and report completions back, so one policy
//! implementation serves both modes.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Run,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Init, Stage::Run, Stage::Eval];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn next(self) -> Option<Stage> {
        match self {
            Stage::Init => Some(Stage::Run),
            Stage::Run => Some(Stage::Eval),
            Stage::Eval => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Run => "run",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Queued,
    Running,
    Done,
    Failed,
    /// An upstream stage of the same trajectory failed.
    Cancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageJob {
    pub traj_id: usize,
    pub stage: Stage,
    pub status: StageStatus,
    pub enqueue_time: Option<u64>,
    pub start_time: Option<u64>,
    pub end_time: Option<u64>,
}

impl StageJob {
    pub fn queued(traj_id: usize, stage: Stage) -> Self {
        Self { traj_id, stage, status: StageStatus::Queued, enqueue_time: None, start_time: None, end_time: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    AsyncBatch,
    AsyncBatchBounded,
    AsyncPipeline,
    PriorityPipeline,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::AsyncBatch => "async_batch",
            PolicyKind::AsyncBatchBounded => "async_batch_bounded",
            PolicyKind::AsyncPipeline => "async_pipeline",
            PolicyKind::PriorityPipeline => "priority_pipeline",
        }
    }
}

pub const DEFAULT_POOL_SIZE: u32 = 8;
pub const DEFAULT_QUEUE_BOUNDS: [u32; 3] = [8, 16, 8];
pub const DEFAULT_CPU_STAGE_WORKERS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DispatchPolicy {
    pub kind: PolicyKind,
    /// Admission slots for the bounded batch policy.
    pub pool_size: u32,
    /// Capacity of the init, run and eval queues.
    pub queue_bounds: [u32; 3],
    /// Workers per stage; the run count defaults to the GPU slot count.
    pub stage_workers: Option<[u32; 3]>,
    /// Cost estimator used by the priority policy.
    pub priority_key: String,
}

impl Default for DispatchPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::AsyncPipeline,
            pool_size: DEFAULT_POOL_SIZE,
            queue_bounds: DEFAULT_QUEUE_BOUNDS,
            stage_workers: None,
            priority_key: String::from("eval_cost"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DispatchError {
    #[error("no dispatcher named `{0}` is registered")]
    UnknownDispatcher(String),
    #[error("dispatcher `{0}` is already registered")]
    DuplicateName(String),
    #[error("invalid dispatch policy: {0}")]
    InvalidPolicy(String),
}

impl DispatchPolicy {
    pub fn of(kind: PolicyKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn bounded(pool_size: u32) -> Self {
        Self { kind: PolicyKind::AsyncBatchBounded, pool_size, ..Self::default() }
    }

    pub fn pipeline(queue_bounds: [u32; 3], stage_workers: [u32; 3]) -> Self {
        Self { kind: PolicyKind::AsyncPipeline, queue_bounds, stage_workers: Some(stage_workers), ..Self::default() }
    }

    /// Stage worker counts with the GPU-sized run default filled in.
    pub fn workers(&self, gpu_slots: u32) -> [u32; 3] {
        self.stage_workers
            .unwrap_or([DEFAULT_CPU_STAGE_WORKERS, gpu_slots, DEFAULT_CPU_STAGE_WORKERS])
    }

    pub fn validate(&self) -> Result<(), DispatchError> {
        if self.pool_size < 1 {
            return Err(DispatchError::InvalidPolicy("pool_size must be at least 1".into()));
        }
        if self.queue_bounds.contains(&0) {
            return Err(DispatchError::InvalidPolicy("queue bounds must be at least 1".into()));
        }
        if self.stage_workers.is_some_and(|w| w.contains(&0)) {
            return Err(DispatchError::InvalidPolicy("stage workers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-trajectory facts a policy may order by.
#[derive(Debug, Clone, PartialEq)]
pub struct JobMeta {
    pub task_id: String,
    /// Estimated cost from the policy's priority key.
    pub cost: f64,
}

/// Descending by cost, ties by task id, then by submission order.
pub fn priority_order(jobs: &[JobMeta]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..jobs.len()).collect();
    idx.sort_by(|&a, &b| {
        jobs[b]
            .cost
            .total_cmp(&jobs[a].cost)
            .then_with(|| jobs[a].task_id.cmp(&jobs[b].task_id))
            .then(a.cmp(&b))
    });
    idx
}

/// A policy's admission state machine.
pub trait Scheduler {
    /// Next stage job allowed to start now, if any.
    fn next_ready(&mut self) -> Option<(usize, Stage)>;
    /// Reports that a started stage job finished.
    fn complete(&mut self, job: usize, stage: Stage, ok: bool);
    /// Current depth of each queue the policy keeps.
    fn queue_depths(&self) -> Vec<usize>;
    fn queue_names(&self) -> Vec<&'static str>;
}

/// What a scheduler factory gets to look at.
#[derive(Debug, Clone)]
pub struct ScheduleContext<'a> {
    pub jobs: &'a [JobMeta],
    pub gpu_slots: u32,
}

/// Trajectory-level admission: each admitted job runs its stages back to
/// back while holding its slot. `pool = None` admits everything at once.
pub struct BatchScheduler {
    pool: Option<usize>,
    waiting: VecDeque<usize>,
    ready: VecDeque<(usize, Stage)>,
    holding: usize,
}

impl BatchScheduler {
    pub fn new(order: impl IntoIterator<Item = usize>, pool: Option<usize>) -> Self {
        let mut s = Self { pool, waiting: order.into_iter().collect(), ready: VecDeque::new(), holding: 0 };
        s.admit();
        s
    }

    fn admit(&mut self) {
        while self.pool.is_none_or(|p| self.holding < p) {
            let Some(j) = self.waiting.pop_front() else { break };
            self.holding += 1;
            self.ready.push_back((j, Stage::Init));
        }
    }
}

impl Scheduler for BatchScheduler {
    fn next_ready(&mut self) -> Option<(usize, Stage)> {
        self.ready.pop_front()
    }

    fn complete(&mut self, job: usize, stage: Stage, ok: bool) {
        match stage.next() {
            Some(next) if ok => self.ready.push_back((job, next)),
            _ => {
                self.holding -= 1;
                self.admit();
            }
        }
    }

    fn queue_depths(&self) -> Vec<usize> {
        vec![self.waiting.len()]
    }

    fn queue_names(&self) -> Vec<&'static str> {
        vec!["admission"]
    }
}

/// Three bounded stage queues with fixed worker pools.
///
/// A job finishing stage `s` moves into queue `s+1`; if that queue is full
/// it stays parked on its stage-`s` worker until space frees up, so a full
/// downstream queue stalls upstream work instead of dropping jobs.
pub struct PipelineScheduler {
    source: VecDeque<usize>,
    queues: [VecDeque<usize>; 3],
    bounds: [usize; 3],
    workers: [usize; 3],
    busy: [usize; 3],
    parked: [VecDeque<usize>; 3],
}

impl PipelineScheduler {
    pub fn new(order: impl IntoIterator<Item = usize>, bounds: [u32; 3], workers: [u32; 3]) -> Self {
        Self {
            source: order.into_iter().collect(),
            queues: Default::default(),
            bounds: bounds.map(|b| b as usize),
            workers: workers.map(|w| w as usize),
            busy: [0; 3],
            parked: Default::default(),
        }
    }

    fn settle(&mut self) {
        for s in (0..2).rev() {
            while self.queues[s + 1].len() < self.bounds[s + 1] {
                let Some(j) = self.parked[s].pop_front() else { break };
                self.queues[s + 1].push_back(j);
                self.busy[s] -= 1;
            }
        }
        while self.queues[0].len() < self.bounds[0] {
            let Some(j) = self.source.pop_front() else { break };
            self.queues[0].push_back(j);
        }
    }
}

impl Scheduler for PipelineScheduler {
    fn next_ready(&mut self) -> Option<(usize, Stage)> {
        self.settle();
        for s in (0..3).rev() {
            if self.busy[s] < self.workers[s] {
                if let Some(j) = self.queues[s].pop_front() {
                    self.busy[s] += 1;
                    return Some((j, Stage::ALL[s]));
                }
            }
        }
        None
    }

    fn complete(&mut self, job: usize, stage: Stage, ok: bool) {
        let s = stage.index();
        if !ok || stage == Stage::Eval {
            self.busy[s] -= 1;
        } else if self.queues[s + 1].len() < self.bounds[s + 1] && self.parked[s].is_empty() {
            self.queues[s + 1].push_back(job);
            self.busy[s] -= 1;
        } else {
            self.parked[s].push_back(job);
        }
    }

    fn queue_depths(&self) -> Vec<usize> {
        self.queues.iter().map(VecDeque::len).collect()
    }

    fn queue_names(&self) -> Vec<&'static str> {
        vec!["init", "run", "eval"]
    }
}

/// Builds a scheduler for a batch.
pub type SchedulerFactory =
    Box<dyn Fn(&DispatchPolicy, &ScheduleContext<'_>) -> Box<dyn Scheduler> + Send + Sync>;

/// Name-keyed dispatcher implementations.
pub struct DispatcherRegistry {
    entries: BTreeMap<String, SchedulerFactory>,
}

impl Default for DispatcherRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl DispatcherRegistry {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        let builtins: [(PolicyKind, SchedulerFactory); 4] = [
            (
                PolicyKind::AsyncBatch,
                Box::new(|_p: &DispatchPolicy, cx: &ScheduleContext<'_>| -> Box<dyn Scheduler> {
                    Box::new(BatchScheduler::new(0..cx.jobs.len(), None))
                }),
            ),
            (
                PolicyKind::AsyncBatchBounded,
                Box::new(|p: &DispatchPolicy, cx: &ScheduleContext<'_>| -> Box<dyn Scheduler> {
                    Box::new(BatchScheduler::new(0..cx.jobs.len(), Some(p.pool_size as usize)))
                }),
            ),
            (
                PolicyKind::AsyncPipeline,
                Box::new(|p: &DispatchPolicy, cx: &ScheduleContext<'_>| -> Box<dyn Scheduler> {
                    Box::new(PipelineScheduler::new(0..cx.jobs.len(), p.queue_bounds, p.workers(cx.gpu_slots)))
                }),
            ),
            (
                PolicyKind::PriorityPipeline,
                Box::new(|p: &DispatchPolicy, cx: &ScheduleContext<'_>| -> Box<dyn Scheduler> {
                    Box::new(PipelineScheduler::new(
                        priority_order(cx.jobs),
                        p.queue_bounds,
                        p.workers(cx.gpu_slots),
                    ))
                }),
            ),
        ];
        for (kind, f) in builtins {
            r.entries.insert(kind.name().into(), f);
        }
        r
    }

    pub fn register_dispatcher(&mut self, name: &str, factory: SchedulerFactory) -> Result<(), DispatchError> {
        if self.entries.contains_key(name) {
            return Err(DispatchError::DuplicateName(name.into()));
        }
        self.entries.insert(name.into(), factory);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Instantiates the named dispatcher; fails before any job starts.
    pub fn build(
        &self,
        name: &str,
        policy: &DispatchPolicy,
        cx: &ScheduleContext<'_>,
    ) -> Result<Box<dyn Scheduler>, DispatchError> {
        policy.validate()?;
        let f = self.entries.get(name).ok_or_else(|| DispatchError::UnknownDispatcher(name.into()))?;
        Ok(f(policy, cx))
    }
}
