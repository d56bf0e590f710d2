use std::collections::BTreeSet;
use std::sync::Arc;

use rollout_core::dispatch::{
    BatchScheduler, DispatchError, DispatchPolicy, DispatcherRegistry, JobMeta, PipelineScheduler, PolicyKind,
    ScheduleContext, Stage, StageStatus,
};
use rollout_core::registry::RegistryBuilder;
use rollout_core::sim::{
    compare_policies, critical_path_lower_bound, run_simulated, simulate, utilization, Dist, GrantEventKind,
    Resource, ResourceModel, ScheduleMetrics, Segment, SegmentExecutor, SimulatedWorkload, StageExecutor, StageStep,
    UtilizationError, UtilizationTrace, WorkloadSpec,
};

fn two_jobs() -> SegmentExecutor {
    SegmentExecutor::uniform(2, 2, vec![Segment::gpu(3)], 1)
}

#[test]
fn two_job_example_gpu_utilization() {
    let rm = ResourceModel::new(1, 1);
    let mut s = BatchScheduler::new(0..2, Some(1));
    let bounded = simulate(&mut s, &mut two_jobs(), 2, rm);
    let mut s = PipelineScheduler::new(0..2, [1, 1, 1], [1, 1, 1]);
    let pipe = simulate(&mut s, &mut two_jobs(), 2, rm);
    assert_eq!((bounded.makespan, pipe.makespan), (12, 9));
    let u = |r: &rollout_core::sim::SimReport| {
        let t = UtilizationTrace::from_events(&r.events, rm, r.makespan);
        utilization(&t, Resource::Gpu, (0, r.makespan)).unwrap()
    };
    assert!((u(&pipe) - 6.0 / 9.0).abs() < 1e-12);
    assert!((u(&bounded) - 6.0 / 12.0).abs() < 1e-12);
    let t = UtilizationTrace::from_events(&pipe.events, rm, pipe.makespan);
    assert_eq!(utilization(&t, Resource::Gpu, (3, 3)), Err(UtilizationError::EmptyWindow));
}

#[test]
fn event_log_is_request_acquire_release_per_grant() {
    let mut s = PipelineScheduler::new(0..2, [1, 1, 1], [1, 1, 1]);
    let r = simulate(&mut s, &mut two_jobs(), 2, ResourceModel::new(1, 1));
    let acquires = r.events.iter().filter(|e| e.kind == GrantEventKind::Acquire).count();
    let releases = r.events.iter().filter(|e| e.kind == GrantEventKind::Release).count();
    assert_eq!((acquires, releases), (6, 6));
    assert!(r.events.windows(2).all(|w| w[0].time <= w[1].time));
}

#[test]
fn unknown_dispatcher_fails_before_any_job() {
    let reg = DispatcherRegistry::with_builtins();
    let cx = ScheduleContext { jobs: &[], gpu_slots: 1 };
    let err = reg.build("round_robin", &DispatchPolicy::default(), &cx).err().unwrap();
    assert_eq!(err, DispatchError::UnknownDispatcher("round_robin".into()));
}

#[test]
fn custom_dispatcher_is_selectable() {
    let mut reg = DispatcherRegistry::with_builtins();
    reg.register_dispatcher(
        "serial",
        Box::new(|_, cx| Box::new(BatchScheduler::new(0..cx.jobs.len(), Some(1)))),
    )
    .unwrap();
    let metas = vec![JobMeta { task_id: "a".into(), cost: 0.0 }; 2];
    let cx = ScheduleContext { jobs: &metas, gpu_slots: 1 };
    let mut s = reg.build("serial", &DispatchPolicy::default(), &cx).unwrap();
    let r = simulate(s.as_mut(), &mut two_jobs(), 2, ResourceModel::new(1, 1));
    assert_eq!(r.makespan, 12);
    let dup = reg.register_dispatcher("async_pipeline", Box::new(|_, _| Box::new(BatchScheduler::new(0..0, None))));
    assert_eq!(dup, Err(DispatchError::DuplicateName("async_pipeline".into())));
}

#[test]
fn priority_admits_expensive_eval_first() {
    let plans = vec![
        [vec![Segment::cpu(1)], vec![Segment::gpu(1)], vec![Segment::cpu(1)]],
        [vec![Segment::cpu(1)], vec![Segment::gpu(1)], vec![Segment::cpu(5)]],
    ];
    let metas = vec![JobMeta { task_id: "a".into(), cost: 1.0 }, JobMeta { task_id: "b".into(), cost: 5.0 }];
    let cx = ScheduleContext { jobs: &metas, gpu_slots: 1 };
    let reg = DispatcherRegistry::with_builtins();
    let policy = DispatchPolicy::pipeline([2, 2, 2], [2, 1, 2]);
    let rm = ResourceModel::new(1, 2);
    let mut fifo = reg.build("async_pipeline", &policy, &cx).unwrap();
    let a = simulate(fifo.as_mut(), &mut SegmentExecutor::new(plans.clone()), 2, rm);
    let prio_policy = DispatchPolicy { kind: PolicyKind::PriorityPipeline, ..policy };
    let mut prio = reg.build("priority_pipeline", &prio_policy, &cx).unwrap();
    let b = simulate(prio.as_mut(), &mut SegmentExecutor::new(plans), 2, rm);
    assert_eq!((a.makespan, b.makespan), (8, 7));
}

struct FailInit(SegmentExecutor, usize);

impl StageExecutor for FailInit {
    fn step(&mut self, job: usize, stage: Stage, now: u64) -> StageStep {
        if job == self.1 && stage == Stage::Run {
            return StageStep::Failed("boom".into());
        }
        self.0.step(job, stage, now)
    }
}

#[test]
fn failure_cancels_only_its_downstream() {
    for pipeline in [false, true] {
        let mut exec = FailInit(SegmentExecutor::uniform(4, 1, vec![Segment::gpu(2)], 1), 1);
        let r = if pipeline {
            simulate(&mut PipelineScheduler::new(0..4, [1, 1, 1], [1, 1, 1]), &mut exec, 4, ResourceModel::new(1, 1))
        } else {
            simulate(&mut BatchScheduler::new(0..4, Some(2)), &mut exec, 4, ResourceModel::new(1, 1))
        };
        assert_eq!(r.stages[1][0].status, StageStatus::Done);
        assert_eq!(r.stages[1][1].status, StageStatus::Failed);
        assert_eq!(r.stages[1][2].status, StageStatus::Cancelled);
        for j in [0, 2, 3] {
            assert!(r.stages[j].iter().all(|s| s.status == StageStatus::Done));
        }
        assert_eq!(r.failures[&1].0, Stage::Run);
    }
}

fn small_workload(init: u64, eval: u64, tasks: u32, rollouts: u32) -> SimulatedWorkload {
    let spec = WorkloadSpec { tasks, rollouts_per_task: rollouts, tool_calls: [2, 4], output_tokens: [20, 60], ..Default::default() };
    let mut profile = rollout_core::sim::calibrated_profile();
    profile.init_cost = Dist::Fixed(init);
    profile.eval_cost = Dist::Fixed(eval);
    profile.decode_per_token = 0.05;
    SimulatedWorkload::generate(&spec, profile, ResourceModel::new(4, 4), 11)
}

#[test]
fn zero_cpu_stage_cost_gives_no_speedup() {
    let w = small_workload(0, 0, 16, 4);
    let reg = RegistryBuilder::with_builtins().freeze();
    let policies = vec![
        ("async_batch_bounded".to_string(), DispatchPolicy::bounded(4)),
        ("async_pipeline".to_string(), DispatchPolicy::pipeline([4, 4, 4], [4, 4, 4])),
    ];
    let (rep, _) = compare_policies(&w, &reg, &DispatcherRegistry::with_builtins(), &policies).unwrap();
    let s = rep.speedup("async_pipeline", "async_batch_bounded").unwrap();
    assert!((s - 1.0).abs() <= 0.02, "speedup {s}");
}

#[test]
fn single_job_is_policy_independent() {
    let w = small_workload(5, 4, 1, 1);
    let reg = RegistryBuilder::with_builtins().freeze();
    let names = ["async_batch", "async_batch_bounded", "async_pipeline", "priority_pipeline"];
    let policies: Vec<_> = names
        .iter()
        .map(|n| {
            let kind = [PolicyKind::AsyncBatch, PolicyKind::AsyncBatchBounded, PolicyKind::AsyncPipeline, PolicyKind::PriorityPipeline]
                .into_iter()
                .find(|k| k.name() == *n)
                .unwrap();
            (n.to_string(), DispatchPolicy::of(kind))
        })
        .collect();
    let (rep, _) = compare_policies(&w, &reg, &DispatcherRegistry::with_builtins(), &policies).unwrap();
    let spans: BTreeSet<u64> = rep.policies.iter().map(|p| p.makespan).collect();
    assert_eq!(spans.len(), 1, "{:?}", rep.policies);
}

#[test]
fn compare_needs_two_policies() {
    let w = small_workload(1, 1, 1, 1);
    let reg = RegistryBuilder::with_builtins().freeze();
    let one = vec![("async_pipeline".to_string(), DispatchPolicy::default())];
    assert!(compare_policies(&w, &reg, &DispatcherRegistry::with_builtins(), &one).is_err());
}

#[test]
fn generation_occupancy_matches_run_gpu_busy() {
    let w = small_workload(3, 2, 8, 2);
    let reg = RegistryBuilder::with_builtins().freeze();
    let tok = Arc::new(w.tokenizer(&reg));
    let run = run_simulated(&w, &reg, &tok, &DispatcherRegistry::with_builtins(), "async_pipeline", &DispatchPolicy::default())
        .unwrap();
    let gen: u64 = run
        .report
        .intervals()
        .iter()
        .filter(|(_, s, r, ..)| *s == Stage::Run && *r == Resource::Gpu)
        .map(|(.., a, b)| b - a)
        .sum();
    assert_eq!(run.metrics.per_stage_busy["run"].gpu, gen);
    let expected: u64 = run
        .jobs
        .iter()
        .flat_map(|j| j.transitions.iter())
        .map(|t| w.profile.generation_cost(t.input_ids.len(), t.output_ids.len()))
        .sum();
    assert_eq!(gen, expected);
    let m2 = ScheduleMetrics::from_report(&run.report, 3);
    assert_eq!(m2.stragglers.len(), 3);
    assert!(m2.gpu_utilization_series.iter().all(|&(_, u)| (0.0..=1.0).contains(&u)));
}

#[test]
fn simulator_stays_above_the_lower_bound() {
    let w = small_workload(4, 3, 8, 2);
    let reg = RegistryBuilder::with_builtins().freeze();
    let tok = Arc::new(w.tokenizer(&reg));
    for (name, p) in [("async_batch_bounded", DispatchPolicy::bounded(2)), ("async_pipeline", DispatchPolicy::default())] {
        let run = run_simulated(&w, &reg, &tok, &DispatcherRegistry::with_builtins(), name, &p).unwrap();
        let mut demands = vec![Vec::new(); run.jobs.len()];
        for (j, _, r, _, a, b) in run.report.intervals() {
            demands[j].push((r, b - a));
        }
        let pool = (name == "async_batch_bounded").then_some(2);
        let lb = critical_path_lower_bound(&demands, w.resources, pool);
        assert!(run.metrics.makespan >= lb.value(), "{name}: {} < {lb:?}", run.metrics.makespan);
    }
}

#[test]
fn calibrated_batch_has_512_trajectory_groups() {
    let w = SimulatedWorkload::calibrated();
    assert_eq!(w.trajectories(), 512);
    let reg = RegistryBuilder::with_builtins().freeze();
    let tok = Arc::new(w.tokenizer(&reg));
    let (_, pipe) = rollout_core::sim::calibrated_policies();
    let run = run_simulated(&w, &reg, &tok, &DispatcherRegistry::with_builtins(), "async_pipeline", &pipe).unwrap();
    let batch = run.batch().unwrap();
    let groups: BTreeSet<usize> = batch.samples.iter().map(|s| s.traj_idx).collect();
    assert_eq!(groups.len(), 512);
    assert!(batch.samples.windows(2).all(|w| w[0].traj_idx <= w[1].traj_idx));
}
