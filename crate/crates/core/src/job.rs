//! Per-trajectory results as they leave the dispatcher.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde_json::Value;

use crate::agent::TrajectoryState;
use crate::dispatch::{Stage, StageJob, StageStatus};
use crate::recorder::{post_process, BatchRecord, FinishedTrajectory, PostProcessError, Transition};
use crate::registry::TaskSpec;

/// One rollout of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryJob {
    pub traj_idx: usize,
    pub task_idx: usize,
    pub task_id: String,
    pub rollout: u32,
    pub stages: [StageJob; 3],
    pub state: Option<TrajectoryState>,
    pub transitions: Vec<Transition>,
    pub reward: Option<f64>,
    pub verify_failure: Option<String>,
    pub metrics: BTreeMap<String, Value>,
    /// Why a stage failed, if one did.
    pub failure: Option<String>,
}

impl TrajectoryJob {
    pub fn new(traj_idx: usize, task_idx: usize, task_id: &str, rollout: u32) -> Self {
        Self {
            traj_idx,
            task_idx,
            task_id: task_id.into(),
            rollout,
            stages: Stage::ALL.map(|s| StageJob::queued(traj_idx, s)),
            state: None,
            transitions: Vec::new(),
            reward: None,
            verify_failure: None,
            metrics: BTreeMap::new(),
            failure: None,
        }
    }

    pub fn stage(&self, s: Stage) -> &StageJob {
        &self.stages[s.index()]
    }

    pub fn stage_mut(&mut self, s: Stage) -> &mut StageJob {
        &mut self.stages[s.index()]
    }

    pub fn is_complete(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Done)
    }

    pub fn is_failed(&self) -> bool {
        self.stages.iter().any(|s| s.status == StageStatus::Failed)
    }

    pub fn end_time(&self) -> Option<u64> {
        self.stages.iter().filter_map(|s| s.end_time).max()
    }

    /// Marks `stage` failed and cancels the stages after it.
    pub fn fail(&mut self, stage: Stage, now: u64, reason: String) {
        let sj = self.stage_mut(stage);
        sj.status = StageStatus::Failed;
        sj.end_time = Some(now);
        let mut next = stage.next();
        while let Some(s) = next {
            self.stage_mut(s).status = StageStatus::Cancelled;
            next = s.next();
        }
        self.failure.get_or_insert(reason);
        self.metrics.insert("failed_stage".into(), Value::from(stage.as_str()));
    }
}

/// `(task_idx, rollout)` for every trajectory, rollouts of a task adjacent.
pub fn plan(tasks: &[TaskSpec], rollouts_per_task: u32) -> Vec<(usize, u32)> {
    (0..tasks.len()).flat_map(|t| (0..rollouts_per_task).map(move |r| (t, r))).collect()
}

pub fn new_jobs(tasks: &[TaskSpec], rollouts_per_task: u32) -> Vec<TrajectoryJob> {
    plan(tasks, rollouts_per_task)
        .into_iter()
        .enumerate()
        .map(|(i, (t, r))| TrajectoryJob::new(i, t, &tasks[t].task_id, r))
        .collect()
}

/// Batch rows for every trajectory that finished all three stages.
/// Failed trajectories carry no reward and are left out.
pub fn assemble_batch(jobs: &[TrajectoryJob]) -> Result<BatchRecord, PostProcessError> {
    let finished: Vec<FinishedTrajectory<'_>> = jobs
        .iter()
        .filter(|j| j.is_complete())
        .map(|j| FinishedTrajectory {
            traj_idx: j.traj_idx,
            transitions: &j.transitions,
            reward: j.reward,
            metrics: &j.metrics,
        })
        .collect();
    post_process(&finished)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failure_cancels_downstream_only() {
        let mut j = TrajectoryJob::new(0, 0, "t", 0);
        j.stage_mut(Stage::Init).status = StageStatus::Done;
        j.fail(Stage::Run, 4, "boom".into());
        assert_eq!(j.stage(Stage::Init).status, StageStatus::Done);
        assert_eq!(j.stage(Stage::Run).status, StageStatus::Failed);
        assert_eq!(j.stage(Stage::Eval).status, StageStatus::Cancelled);
        assert!(j.is_failed() && !j.is_complete());
    }

    #[test]
    fn plan_counts() {
        let tasks: Vec<TaskSpec> =
            (0..64).map(|i| TaskSpec::new(alloc::format!("t{i}"), &[], Value::Null)).collect();
        let p = plan(&tasks, 8);
        assert_eq!(p.len(), 512);
        assert_eq!(p[9], (1, 1));
    }
}
