use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::{GrantEvent, GrantEventKind, Resource, ResourceModel, SimReport};
use crate::dispatch::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub time: u64,
    pub gpu: f64,
    pub cpu: f64,
}

/// Busy fractions per tick, rebuilt from the grant event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationTrace {
    pub tick: u64,
    pub resources: ResourceModel,
    /// Sample `t` covers `[t, t + tick)`.
    pub samples: Vec<TraceSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum UtilizationError {
    #[error("utilization window is empty")]
    EmptyWindow,
    #[error("window {0}..{1} is outside the trace")]
    OutOfSpan(u64, u64),
}

impl UtilizationTrace {
    /// Tick is one time unit; since every grant starts and ends on a whole
    /// unit, each sample is exact.
    pub fn from_events(events: &[GrantEvent], resources: ResourceModel, end: u64) -> Self {
        let n = end as usize;
        let mut delta = [alloc::vec![0i64; n + 1], alloc::vec![0i64; n + 1]];
        for e in events {
            let r = match e.resource {
                Resource::Cpu => 0,
                Resource::Gpu => 1,
            };
            let t = (e.time as usize).min(n);
            match e.kind {
                GrantEventKind::Acquire => delta[r][t] += 1,
                GrantEventKind::Release => delta[r][t] -= 1,
                GrantEventKind::Request => {}
            }
        }
        let (mut cpu, mut gpu) = (0i64, 0i64);
        let cap_cpu = resources.cpu_workers.max(1) as f64;
        let cap_gpu = resources.gpu_slots.max(1) as f64;
        let samples = (0..n)
            .map(|t| {
                cpu += delta[0][t];
                gpu += delta[1][t];
                TraceSample { time: t as u64, gpu: gpu as f64 / cap_gpu, cpu: cpu as f64 / cap_cpu }
            })
            .collect();
        Self { tick: 1, resources, samples }
    }

    pub fn series(&self, r: Resource) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(move |s| match r {
            Resource::Cpu => s.cpu,
            Resource::Gpu => s.gpu,
        })
    }
}

/// Busy-grant time over `capacity × window length`.
pub fn utilization(trace: &UtilizationTrace, r: Resource, window: (u64, u64)) -> Result<f64, UtilizationError> {
    let (a, b) = window;
    if b <= a {
        return Err(UtilizationError::EmptyWindow);
    }
    if b > trace.samples.len() as u64 {
        return Err(UtilizationError::OutOfSpan(a, b));
    }
    let sum: f64 = trace.series(r).skip(a as usize).take((b - a) as usize).sum();
    Ok(sum / (b - a) as f64)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBusy {
    pub cpu: u64,
    pub gpu: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMetrics {
    pub makespan: u64,
    /// Grant time summed per stage and resource.
    pub per_stage_busy: BTreeMap<String, StageBusy>,
    pub gpu_utilization_series: Vec<(u64, f64)>,
    pub cpu_utilization_series: Vec<(u64, f64)>,
    pub queue_depth_series: BTreeMap<String, Vec<(u64, usize)>>,
    /// Slowest trajectories first, by time from init start to last stage end.
    pub stragglers: Vec<usize>,
    /// First GPU grant to last GPU release.
    pub generation_window: (u64, u64),
    pub mean_gpu_utilization: f64,
    pub gpu_utilization_variance: f64,
    pub mean_cpu_utilization: f64,
}

pub const DEFAULT_STRAGGLERS: usize = 5;

impl ScheduleMetrics {
    pub fn from_report(report: &SimReport, stragglers: usize) -> Self {
        let trace = UtilizationTrace::from_events(&report.events, report.resources, report.makespan);
        let mut per_stage_busy: BTreeMap<String, StageBusy> =
            Stage::ALL.iter().map(|s| (String::from(s.as_str()), StageBusy::default())).collect();
        let mut window: Option<(u64, u64)> = None;
        for (_, stage, r, _, a, b) in report.intervals() {
            let busy = per_stage_busy.get_mut(stage.as_str()).expect("all stages present");
            match r {
                Resource::Cpu => busy.cpu += b - a,
                Resource::Gpu => {
                    busy.gpu += b - a;
                    window = Some(match window {
                        None => (a, b),
                        Some((x, y)) => (x.min(a), y.max(b)),
                    });
                }
            }
        }
        let window = window.unwrap_or((0, 0));
        let gpu_in_window: Vec<f64> =
            trace.series(Resource::Gpu).skip(window.0 as usize).take((window.1 - window.0) as usize).collect();
        let (mean_gpu, var_gpu) = mean_var(&gpu_in_window);
        let cpu_all: Vec<f64> = trace.series(Resource::Cpu).collect();
        let (mean_cpu, _) = mean_var(&cpu_all);

        let mut queue_depth_series: BTreeMap<String, Vec<(u64, usize)>> = BTreeMap::new();
        for (i, name) in report.queue_names.iter().enumerate() {
            let series = report.queue_depths.iter().map(|q| (q.time, q.depths.get(i).copied().unwrap_or(0))).collect();
            queue_depth_series.insert(String::from(*name), series);
        }

        let mut lat: Vec<(u64, usize)> = report
            .stages
            .iter()
            .enumerate()
            .filter_map(|(j, s)| {
                let start = s[0].start_time?;
                let end = s.iter().filter_map(|x| x.end_time).max()?;
                Some((end - start, j))
            })
            .collect();
        lat.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

        Self {
            makespan: report.makespan,
            per_stage_busy,
            gpu_utilization_series: trace.samples.iter().map(|s| (s.time, s.gpu)).collect(),
            cpu_utilization_series: trace.samples.iter().map(|s| (s.time, s.cpu)).collect(),
            queue_depth_series,
            stragglers: lat.into_iter().take(stragglers).map(|(_, j)| j).collect(),
            generation_window: window,
            mean_gpu_utilization: mean_gpu,
            gpu_utilization_variance: var_gpu,
            mean_cpu_utilization: mean_cpu,
        }
    }
}
