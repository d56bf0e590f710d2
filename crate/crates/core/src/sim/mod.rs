//! Virtual-time simulation of stage jobs contending for CPU workers and GPU
//! slots.
//!
//! The engine pulls ready stage jobs from a [`Scheduler`], asks a
//! [`StageExecutor`] what each one needs next, and grants resources FIFO per
//! resource kind. Time is an integer count of abstract units; nothing sleeps.

mod bound;
mod compare;
mod cost;
mod exec;
mod trace;
mod workload;

pub use bound::{critical_path_lower_bound, LowerBound};
pub use compare::{compare_policies, CompareError, CompareReport, PolicyResult};
pub use cost::{CostOverride, CostProfile, Dist, Purpose};
pub use exec::{AgentExecutor, Segment, SegmentExecutor};
pub use trace::{utilization, ScheduleMetrics, DEFAULT_STRAGGLERS, StageBusy, TraceSample, UtilizationError, UtilizationTrace};
pub use workload::{
    calibrated_policies, calibrated_profile, estimate_cost, run_simulated, SimRun, SimulatedWorkload, WorkloadError,
    WorkloadSpec,
};

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Reverse;
use serde::{Deserialize, Serialize};

use crate::dispatch::{Scheduler, Stage, StageJob, StageStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Cpu,
    Gpu,
}

impl Resource {
    pub fn as_str(self) -> &'static str {
        match self {
            Resource::Cpu => "cpu",
            Resource::Gpu => "gpu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceModel {
    pub gpu_slots: u32,
    pub cpu_workers: u32,
}

impl Default for ResourceModel {
    fn default() -> Self {
        Self { gpu_slots: 16, cpu_workers: 16 }
    }
}

impl ResourceModel {
    pub fn new(gpu_slots: u32, cpu_workers: u32) -> Self {
        Self { gpu_slots, cpu_workers }
    }

    pub fn capacity(&self, r: Resource) -> u32 {
        match r {
            Resource::Cpu => self.cpu_workers,
            Resource::Gpu => self.gpu_slots,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.gpu_slots == 0 || self.cpu_workers == 0 {
            return Err("gpu_slots and cpu_workers must be at least 1".into());
        }
        Ok(())
    }
}

/// What a stage job needs next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageStep {
    /// Hold one unit of `resource` for `duration` time units.
    Demand(Resource, u64),
    Done,
    Failed(String),
}

/// Drives the work of individual stage jobs.
pub trait StageExecutor {
    /// The next demand of `(job, stage)`. Called when the stage starts and
    /// again each time its previous grant ends.
    fn step(&mut self, job: usize, stage: Stage, now: u64) -> StageStep;

    /// A grant held by `(job, stage)` ended.
    fn granted(&mut self, _job: usize, _stage: Stage, _resource: Resource, _start: u64, _end: u64) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrantEventKind {
    Request,
    Acquire,
    Release,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantEvent {
    pub time: u64,
    pub kind: GrantEventKind,
    pub resource: Resource,
    pub grant: u64,
    pub job: usize,
    pub stage: Stage,
    /// Slot index, once acquired.
    pub slot: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSample {
    pub time: u64,
    pub depths: Vec<usize>,
}

/// Everything one simulated dispatch produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub resources: ResourceModel,
    pub makespan: u64,
    pub stages: Vec<[StageJob; 3]>,
    pub events: Vec<GrantEvent>,
    pub queue_names: Vec<&'static str>,
    pub queue_depths: Vec<QueueSample>,
    pub failures: BTreeMap<usize, (Stage, String)>,
}

impl SimReport {
    /// Grants as `(job, stage, resource, slot, start, end)`.
    pub fn intervals(&self) -> Vec<(usize, Stage, Resource, u32, u64, u64)> {
        let mut open: BTreeMap<u64, GrantEvent> = BTreeMap::new();
        let mut out = Vec::new();
        for e in &self.events {
            match e.kind {
                GrantEventKind::Request => {}
                GrantEventKind::Acquire => {
                    open.insert(e.grant, *e);
                }
                GrantEventKind::Release => {
                    if let Some(a) = open.remove(&e.grant) {
                        out.push((a.job, a.stage, a.resource, a.slot.unwrap_or(0), a.time, e.time));
                    }
                }
            }
        }
        out
    }
}

struct Pool {
    free: BTreeSet<u32>,
    waiting: VecDeque<(u64, usize, Stage, u64)>,
}

struct Engine<'a> {
    scheduler: &'a mut dyn Scheduler,
    exec: &'a mut dyn StageExecutor,
    pools: [Pool; 2],
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    grants: Vec<(usize, Stage, Resource, u32, u64)>,
    todo: VecDeque<(usize, Stage)>,
    report: SimReport,
}

fn pool_index(r: Resource) -> usize {
    match r {
        Resource::Cpu => 0,
        Resource::Gpu => 1,
    }
}

impl Engine<'_> {
    fn log(&mut self, time: u64, kind: GrantEventKind, grant: u64, slot: Option<u32>) {
        let (job, stage, resource, ..) = self.grants[grant as usize];
        self.report.events.push(GrantEvent { time, kind, resource, grant, job, stage, slot });
    }

    fn acquire(&mut self, now: u64, resource: Resource, grant: u64, job: usize, stage: Stage, duration: u64) {
        let pool = &mut self.pools[pool_index(resource)];
        let slot = pool.free.pop_first().expect("caller checked for a free slot");
        self.grants[grant as usize] = (job, stage, resource, slot, now);
        self.heap.push(Reverse((now + duration, grant)));
        self.log(now, GrantEventKind::Acquire, grant, Some(slot));
    }

    fn request(&mut self, now: u64, resource: Resource, job: usize, stage: Stage, duration: u64) {
        let grant = self.grants.len() as u64;
        self.grants.push((job, stage, resource, 0, now));
        self.log(now, GrantEventKind::Request, grant, None);
        let pool = &mut self.pools[pool_index(resource)];
        if pool.waiting.is_empty() && !pool.free.is_empty() {
            self.acquire(now, resource, grant, job, stage, duration);
        } else {
            pool.waiting.push_back((grant, job, stage, duration));
        }
    }

    fn release(&mut self, now: u64, grant: u64) {
        let (job, stage, resource, slot, start) = self.grants[grant as usize];
        self.log(now, GrantEventKind::Release, grant, Some(slot));
        self.exec.granted(job, stage, resource, start, now);
        self.pools[pool_index(resource)].free.insert(slot);
        while !self.pools[pool_index(resource)].free.is_empty() {
            let Some((g, j, s, d)) = self.pools[pool_index(resource)].waiting.pop_front() else { break };
            self.acquire(now, resource, g, j, s, d);
        }
        self.todo.push_back((job, stage));
    }

    fn advance(&mut self, now: u64, job: usize, stage: Stage) {
        match self.exec.step(job, stage, now) {
            StageStep::Demand(r, d) => self.request(now, r, job, stage, d),
            StageStep::Done => {
                let rec = &mut self.report.stages[job];
                rec[stage.index()].status = StageStatus::Done;
                rec[stage.index()].end_time = Some(now);
                if let Some(next) = stage.next() {
                    rec[next.index()].enqueue_time = Some(now);
                }
                self.scheduler.complete(job, stage, true);
            }
            StageStep::Failed(reason) => {
                let rec = &mut self.report.stages[job];
                rec[stage.index()].status = StageStatus::Failed;
                rec[stage.index()].end_time = Some(now);
                let mut next = stage.next();
                while let Some(s) = next {
                    rec[s.index()].status = StageStatus::Cancelled;
                    next = s.next();
                }
                self.report.failures.insert(job, (stage, reason));
                self.scheduler.complete(job, stage, false);
            }
        }
    }

    fn settle(&mut self, now: u64) {
        loop {
            while let Some((j, s)) = self.todo.pop_front() {
                self.advance(now, j, s);
            }
            while let Some((j, s)) = self.scheduler.next_ready() {
                let sj = &mut self.report.stages[j][s.index()];
                debug_assert_eq!(sj.status, StageStatus::Queued);
                sj.status = StageStatus::Running;
                sj.start_time = Some(now);
                self.todo.push_back((j, s));
            }
            if self.todo.is_empty() {
                break;
            }
        }
        let depths = self.scheduler.queue_depths();
        if self.report.queue_depths.last().is_none_or(|q| q.depths != depths) {
            self.report.queue_depths.push(QueueSample { time: now, depths });
        }
    }
}

/// Runs `jobs` trajectories to completion under `scheduler`.
pub fn simulate(
    scheduler: &mut dyn Scheduler,
    exec: &mut dyn StageExecutor,
    jobs: usize,
    resources: ResourceModel,
) -> SimReport {
    let stages = (0..jobs)
        .map(|j| {
            Stage::ALL.map(|s| {
                let mut sj = StageJob::queued(j, s);
                if s == Stage::Init {
                    sj.enqueue_time = Some(0);
                }
                sj
            })
        })
        .collect();
    let pool = |n: u32| Pool { free: (0..n).collect(), waiting: VecDeque::new() };
    let queue_names = scheduler.queue_names();
    let mut engine = Engine {
        scheduler,
        exec,
        pools: [pool(resources.cpu_workers), pool(resources.gpu_slots)],
        heap: BinaryHeap::new(),
        grants: Vec::new(),
        todo: VecDeque::new(),
        report: SimReport {
            resources,
            makespan: 0,
            stages,
            events: Vec::new(),
            queue_names,
            queue_depths: Vec::new(),
            failures: BTreeMap::new(),
        },
    };
    let mut now = 0;
    engine.settle(now);
    while let Some(Reverse((t, grant))) = engine.heap.pop() {
        now = t;
        engine.release(now, grant);
        engine.settle(now);
    }
    let mut report = engine.report;
    report.makespan = report
        .stages
        .iter()
        .flat_map(|s| s.iter().filter_map(|j| j.end_time))
        .max()
        .unwrap_or(0);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::{BatchScheduler, PipelineScheduler};
    use alloc::vec;

    fn two_jobs() -> SegmentExecutor {
        SegmentExecutor::uniform(2, 2, vec![Segment::gpu(3)], 1)
    }

    #[test]
    fn bounded_pool_one_takes_twelve() {
        let mut s = BatchScheduler::new(0..2, Some(1));
        let r = simulate(&mut s, &mut two_jobs(), 2, ResourceModel::new(1, 1));
        assert_eq!(r.makespan, 12);
    }

    #[test]
    fn pipeline_takes_nine() {
        let mut s = PipelineScheduler::new(0..2, [1, 1, 1], [1, 1, 1]);
        let r = simulate(&mut s, &mut two_jobs(), 2, ResourceModel::new(1, 1));
        assert_eq!(r.makespan, 9);
        let iv: Vec<_> = r.intervals().into_iter().map(|(j, s, _, _, a, b)| (j, s, a, b)).collect();
        assert_eq!(
            iv,
            [
                (0, Stage::Init, 0, 2),
                (1, Stage::Init, 2, 4),
                (0, Stage::Run, 2, 5),
                (0, Stage::Eval, 5, 6),
                (1, Stage::Run, 5, 8),
                (1, Stage::Eval, 8, 9),
            ]
        );
    }

    #[test]
    fn fifo_serialization() {
        // Two jobs, each a single 5-unit GPU demand, all else free.
        let mk = || SegmentExecutor::uniform(2, 0, vec![Segment::gpu(5)], 0);
        let mut s = BatchScheduler::new(0..2, None);
        let r = simulate(&mut s, &mut mk(), 2, ResourceModel::new(1, 1));
        let ends: Vec<u64> = r.stages.iter().map(|s| s[1].end_time.unwrap()).collect();
        assert_eq!(ends, [5, 10]);
        let mut s = BatchScheduler::new(0..2, None);
        let r = simulate(&mut s, &mut mk(), 2, ResourceModel::new(2, 1));
        let ends: Vec<u64> = r.stages.iter().map(|s| s[1].end_time.unwrap()).collect();
        assert_eq!(ends, [5, 5]);
    }
}
