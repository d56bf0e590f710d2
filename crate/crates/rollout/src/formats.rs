//! Artifact files: JSONL batches, Chrome trace timelines, metrics.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rollout_core::dispatch::{Stage, StageJob, StageStatus};
use rollout_core::recorder::{BatchRecord, ExportLayout, SampleRecord, TransitionRecord};
use rollout_core::sim::SimReport;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: {source}")]
    Line { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("invalid trace: {0}")]
    Trace(String),
}

/// File name of a layout's sample file.
pub fn samples_file_name(layout: ExportLayout) -> String {
    format!("samples.{}.jsonl", layout.as_str())
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// One JSON object per line, rows in batch order.
pub fn export_batch(batch: &BatchRecord, layout: ExportLayout) -> Result<String, serde_json::Error> {
    match layout {
        ExportLayout::MaskedSequence => jsonl(&batch.samples),
        ExportLayout::TransitionList => jsonl(&batch.transitions),
    }
}

fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, FormatError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| FormatError::Line { line: i + 1, source }))
        .collect()
}

pub fn parse_samples(text: &str) -> Result<Vec<SampleRecord>, FormatError> {
    parse_lines(text)
}

pub fn parse_transitions(text: &str) -> Result<Vec<TransitionRecord>, FormatError> {
    parse_lines(text)
}

/// Parses a file written by [`export_batch`] back into the part of the batch
/// that layout carries.
pub fn parse_batch(text: &str, layout: ExportLayout) -> Result<BatchRecord, FormatError> {
    Ok(match layout {
        ExportLayout::MaskedSequence => BatchRecord { samples: parse_samples(text)?, transitions: Vec::new() },
        ExportLayout::TransitionList => BatchRecord { samples: Vec::new(), transitions: parse_transitions(text)? },
    })
}

/// Writes `contents` to a temp file next to `path`, then renames it over
/// `path`, so readers see either the old file or the whole new one.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// A Chrome trace event (`ph` is `B` or `E`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    pub ph: String,
    pub ts: u64,
    pub pid: u32,
    pub tid: u32,
}

pub const GPU_PID: u32 = 1;
pub const CPU_PID: u32 = 2;
pub const STAGE_PID: u32 = 3;

fn sort_events(events: &mut [TraceEvent]) {
    // ends before begins at equal timestamps keep B/E pairs nested per thread
    events.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| b.ph.cmp(&a.ph)).then(a.pid.cmp(&b.pid)).then(a.tid.cmp(&b.tid)));
}

/// Resource grants of a simulated run, one thread per slot; `unit_us` maps
/// time units to trace microseconds.
pub fn sim_trace(report: &SimReport, unit_us: u64) -> Vec<TraceEvent> {
    let mut events = Vec::new();
    for (job, stage, resource, slot, start, end) in report.intervals() {
        let name = format!("traj {job} {}", stage.as_str());
        let pid = match resource {
            rollout_core::sim::Resource::Gpu => GPU_PID,
            rollout_core::sim::Resource::Cpu => CPU_PID,
        };
        events.push(TraceEvent { name: name.clone(), ph: "B".into(), ts: start * unit_us, pid, tid: slot });
        events.push(TraceEvent { name, ph: "E".into(), ts: end * unit_us, pid, tid: slot });
    }
    sort_events(&mut events);
    events
}

/// Stage spans of a live run, one thread per trajectory.
pub fn stage_trace(stages: &[[StageJob; 3]]) -> Vec<TraceEvent> {
    let mut events = Vec::new();
    for (j, s) in stages.iter().enumerate() {
        for sj in s {
            if let (Some(a), Some(b)) = (sj.start_time, sj.end_time) {
                let name = format!("traj {j} {}", sj.stage.as_str());
                events.push(TraceEvent { name: name.clone(), ph: "B".into(), ts: a, pid: STAGE_PID, tid: j as u32 });
                events.push(TraceEvent { name, ph: "E".into(), ts: b, pid: STAGE_PID, tid: j as u32 });
            }
        }
    }
    sort_events(&mut events);
    events
}

/// Summary of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub events: usize,
    pub span_us: u64,
    /// Busy microseconds per process id.
    pub busy_us: BTreeMap<u32, u64>,
    /// Distinct threads per process id.
    pub threads: BTreeMap<u32, usize>,
}

impl TraceSummary {
    /// Busy time over `threads × span` per process id.
    pub fn utilization(&self) -> BTreeMap<u32, f64> {
        self.busy_us
            .iter()
            .map(|(pid, busy)| {
                let lanes = self.threads.get(pid).copied().unwrap_or(1).max(1) as f64;
                let span = self.span_us.max(1) as f64;
                (*pid, *busy as f64 / (lanes * span))
            })
            .collect()
    }
}

/// Checks B/E pairing per thread and totals busy time.
pub fn replay_trace(events: &[TraceEvent]) -> Result<TraceSummary, FormatError> {
    let mut open: BTreeMap<(u32, u32), (String, u64)> = BTreeMap::new();
    let mut busy: BTreeMap<u32, u64> = BTreeMap::new();
    let mut threads: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
    let (mut lo, mut hi) = (u64::MAX, 0u64);
    let mut last_ts = 0;
    for (i, e) in events.iter().enumerate() {
        if e.ts < last_ts {
            return Err(FormatError::Trace(format!("event {i} goes back in time")));
        }
        last_ts = e.ts;
        lo = lo.min(e.ts);
        hi = hi.max(e.ts);
        threads.entry(e.pid).or_default().insert(e.tid);
        match e.ph.as_str() {
            "B" => {
                if open.insert((e.pid, e.tid), (e.name.clone(), e.ts)).is_some() {
                    return Err(FormatError::Trace(format!("event {i}: pid {} tid {} already busy", e.pid, e.tid)));
                }
            }
            "E" => match open.remove(&(e.pid, e.tid)) {
                Some((name, start)) if name == e.name => *busy.entry(e.pid).or_default() += e.ts - start,
                Some((name, _)) => {
                    return Err(FormatError::Trace(format!("event {i}: `{}` closes `{name}`", e.name)));
                }
                None => return Err(FormatError::Trace(format!("event {i}: end without begin"))),
            },
            other => return Err(FormatError::Trace(format!("event {i}: unsupported phase `{other}`"))),
        }
    }
    if let Some(((pid, tid), (name, _))) = open.into_iter().next() {
        return Err(FormatError::Trace(format!("`{name}` on pid {pid} tid {tid} never ends")));
    }
    Ok(TraceSummary {
        events: events.len(),
        span_us: if events.is_empty() { 0 } else { hi - lo },
        busy_us: busy,
        threads: threads.into_iter().map(|(k, v)| (k, v.len())).collect(),
    })
}

/// Per-trajectory entry of metrics.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub traj_idx: usize,
    pub task_id: String,
    pub rollout: u32,
    pub status: String,
    pub reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify_failure: Option<String>,
    pub stages: Vec<StageJob>,
    pub rollout_metrics: BTreeMap<String, Value>,
}

impl TrajectorySummary {
    pub fn from_job(j: &rollout_core::job::TrajectoryJob) -> Self {
        let status = if j.is_complete() {
            "done"
        } else if j.is_failed() {
            "failed"
        } else {
            "incomplete"
        };
        Self {
            traj_idx: j.traj_idx,
            task_id: j.task_id.clone(),
            rollout: j.rollout,
            status: status.into(),
            reward: j.reward,
            failure: j.failure.clone(),
            verify_failure: j.verify_failure.clone(),
            stages: j.stages.to_vec(),
            rollout_metrics: j.metrics.clone(),
        }
    }
}

/// Stage-order check used by tests and `replay-trace`.
pub fn stages_in_order(s: &[StageJob; 3]) -> bool {
    let ends = |x: &StageJob| x.end_time;
    let starts = |x: &StageJob| x.start_time;
    let ordered = |a: &StageJob, b: &StageJob| match (ends(a), starts(b)) {
        (Some(e), Some(st)) => a.status == StageStatus::Done && e <= st,
        (_, None) => true,
        (None, Some(_)) => false,
    };
    debug_assert_eq!(s[0].stage, Stage::Init);
    ordered(&s[0], &s[1]) && ordered(&s[1], &s[2])
}
