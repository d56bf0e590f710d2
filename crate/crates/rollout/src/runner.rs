//! `run` and `compare`: dispatch a configured batch and write its artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rollout_core::dispatch::{DispatchPolicy, DispatcherRegistry, JobMeta, ScheduleContext, StageJob};
use rollout_core::job::{assemble_batch, new_jobs, TrajectoryJob};
use rollout_core::message::template_literals;
use rollout_core::recorder::{ExportLayout, PostProcessError};
use rollout_core::registry::{Registry, RegistryBuilder};
use rollout_core::sim::{
    compare_policies, estimate_cost, run_simulated, CompareError, CompareReport, ScheduleMetrics,
    SimulatedWorkload, WorkloadError,
};
use rollout_core::Tokenizer;
use serde::Serialize;
use serde_json::Value;

use crate::config::{Backend, LoadedConfig};
use crate::formats::{export_batch, samples_file_name, sim_trace, stage_trace, write_atomic, TraceEvent, TrajectorySummary};
use crate::http::{HttpBackend, HttpSetupError};
use crate::live::{dispatch_live, LiveAgentExecutor, LiveError};

pub const METRICS_FILE: &str = "metrics.json";
pub const TIMELINE_FILE: &str = "timeline.trace.json";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Dispatch(#[from] WorkloadError),
    #[error(transparent)]
    Compare(#[from] CompareError),
    #[error(transparent)]
    Live(#[from] LiveError),
    #[error(transparent)]
    Backend(#[from] HttpSetupError),
    #[error("cannot assemble batch: {0}")]
    Batch(#[from] PostProcessError),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

pub fn default_registry() -> Registry {
    RegistryBuilder::with_builtins().freeze()
}

/// Expands `bounded`/`pipeline`/`batch`/`priority` to dispatcher names.
pub fn dispatcher_name(alias: &str) -> &str {
    match alias {
        "batch" => "async_batch",
        "bounded" => "async_batch_bounded",
        "pipeline" => "async_pipeline",
        "priority" => "priority_pipeline",
        other => other,
    }
}

/// What a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub trajectories: usize,
    pub failed: usize,
    pub exported: usize,
}

#[derive(Serialize)]
struct RunMetrics<'a, S: Serialize> {
    dispatcher: &'a str,
    policy: &'a DispatchPolicy,
    seed: u64,
    trajectories: usize,
    failed: usize,
    exported_samples: usize,
    schedule: S,
    rollouts: Vec<TrajectorySummary>,
}

/// Wall-clock schedule metrics of a live run, times in microseconds.
#[derive(Debug, Clone, Serialize)]
pub struct LiveMetrics {
    pub makespan_us: u64,
    pub per_stage_busy_us: BTreeMap<String, u64>,
    pub queue_depth_series: BTreeMap<String, Vec<(u64, usize)>>,
    pub stragglers: Vec<usize>,
}

fn write(path: PathBuf, bytes: &[u8], files: &mut Vec<PathBuf>) -> Result<(), RunError> {
    write_atomic(&path, bytes).map_err(|source| RunError::Write { path: path.clone(), source })?;
    files.push(path);
    Ok(())
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("metrics serialize");
    s.push('\n');
    s.into_bytes()
}

/// The simulated workload a config describes.
pub fn workload(loaded: &LoadedConfig) -> Option<SimulatedWorkload> {
    match &loaded.backend {
        Backend::Simulated { profile, resources, scripts } => Some(SimulatedWorkload {
            tasks: loaded.tasks.clone(),
            rollouts_per_task: loaded.config.rollouts_per_task,
            scripts: scripts.clone(),
            profile: profile.clone(),
            resources: *resources,
            agent: loaded.config.agent,
            seed: loaded.config.seed,
        }),
        Backend::Http(_) => None,
    }
}

fn stragglers(stages: &[[StageJob; 3]], k: usize) -> Vec<usize> {
    let mut lat: Vec<(u64, usize)> = stages
        .iter()
        .enumerate()
        .filter_map(|(j, s)| Some((s.iter().filter_map(|x| x.end_time).max()? - s[0].start_time?, j)))
        .collect();
    lat.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    lat.into_iter().take(k).map(|(_, j)| j).collect()
}

fn write_artifacts<S: Serialize>(
    loaded: &LoadedConfig,
    out: &Path,
    name: &str,
    policy: &DispatchPolicy,
    jobs: &[TrajectoryJob],
    schedule: S,
    timeline: &[TraceEvent],
) -> Result<RunSummary, RunError> {
    let batch = assemble_batch(jobs)?;
    let mut files = Vec::new();
    for &layout in &loaded.layouts {
        let text = export_batch(&batch, layout).expect("batch rows serialize");
        write(out.join(samples_file_name(layout)), text.as_bytes(), &mut files)?;
    }
    let failed = jobs.iter().filter(|j| j.is_failed()).count();
    let metrics = RunMetrics {
        dispatcher: name,
        policy,
        seed: loaded.config.seed,
        trajectories: jobs.len(),
        failed,
        exported_samples: batch.samples.len(),
        schedule,
        rollouts: jobs.iter().map(TrajectorySummary::from_job).collect(),
    };
    write(out.join(METRICS_FILE), &json_bytes(&metrics), &mut files)?;
    write(out.join(TIMELINE_FILE), &json_bytes(&timeline), &mut files)?;
    let exported = if loaded.layouts.contains(&ExportLayout::MaskedSequence) {
        batch.samples.len()
    } else {
        batch.transitions.len()
    };
    Ok(RunSummary { out_dir: out.to_path_buf(), files, trajectories: jobs.len(), failed, exported })
}

/// Runs the configured batch and writes its artifacts to `out` (defaults to
/// the config's `output_dir`).
pub fn run(loaded: &LoadedConfig, registry: &Registry, out: Option<&Path>) -> Result<RunSummary, RunError> {
    let out = out.unwrap_or(&loaded.config.output_dir);
    let name = loaded.config.dispatcher.name();
    let policy = loaded.config.dispatcher.policy(None);
    let dispatchers = DispatcherRegistry::with_builtins();
    match &loaded.backend {
        Backend::Simulated { profile, .. } => {
            let w = workload(loaded).expect("simulated backend");
            let tokenizer = Arc::new(w.tokenizer(registry));
            let sim = run_simulated(&w, registry, &tokenizer, &dispatchers, name, &policy)?;
            let timeline = sim_trace(&sim.report, profile.time_unit_ms * 1000);
            write_artifacts(loaded, out, name, &policy, &sim.jobs, &sim.metrics, &timeline)
        }
        Backend::Http(cfg) => {
            let mut corpus = template_literals();
            for t in &loaded.tasks {
                if let Ok(msgs) = registry.build_instruction(t) {
                    corpus.extend(msgs.into_iter().map(|m| m.content));
                }
            }
            let tokenizer = Arc::new(Tokenizer::from_corpus(corpus));
            let backend = HttpBackend::new(cfg, tokenizer.clone())?;
            let metas = loaded
                .tasks
                .iter()
                .flat_map(|t| (0..loaded.config.rollouts_per_task).map(move |_| t))
                .map(|t| {
                    Ok(JobMeta { task_id: t.task_id.clone(), cost: estimate_cost(&policy.priority_key, t, None)? })
                })
                .collect::<Result<Vec<_>, WorkloadError>>()?;
            let cx = ScheduleContext { jobs: &metas, gpu_slots: cfg.connection_cap };
            let mut scheduler = dispatchers.build(name, &policy, &cx).map_err(WorkloadError::from)?;
            let jobs = new_jobs(&loaded.tasks, loaded.config.rollouts_per_task);
            let n = jobs.len();
            let exec = LiveAgentExecutor::new(registry, &tokenizer, &backend, &loaded.tasks, loaded.config.agent, jobs);
            let report = dispatch_live(scheduler.as_mut(), &exec, n)?;
            let mut jobs = exec.into_jobs();
            for (j, s) in jobs.iter_mut().zip(&report.stages) {
                j.stages = *s;
            }
            let mut busy = BTreeMap::new();
            for s in report.stages.iter().flatten() {
                if let (Some(a), Some(b)) = (s.start_time, s.end_time) {
                    *busy.entry(s.stage.as_str().to_string()).or_insert(0) += b - a;
                }
            }
            let mut queue_depth_series = BTreeMap::new();
            for (i, q) in report.queue_names.iter().enumerate() {
                let series = report.queue_depths.iter().map(|(t, d)| (*t, d.get(i).copied().unwrap_or(0))).collect();
                queue_depth_series.insert(q.to_string(), series);
            }
            let schedule = LiveMetrics {
                makespan_us: report.elapsed_us,
                per_stage_busy_us: busy,
                queue_depth_series,
                stragglers: stragglers(&report.stages, rollout_core::sim::DEFAULT_STRAGGLERS),
            };
            let timeline = stage_trace(&report.stages);
            write_artifacts(loaded, out, name, &policy, &jobs, &schedule, &timeline)
        }
    }
}

/// Parameters for dispatcher `name`: its `policies` entry, else the main
/// dispatcher settings when the name matches, else defaults.
pub fn policy_for(loaded: &LoadedConfig, name: &str) -> DispatchPolicy {
    let c = &loaded.config;
    match c.policies.get(name) {
        Some(d) => d.policy(Some(name)),
        None if c.dispatcher.name() == name => c.dispatcher.policy(None),
        None => crate::config::DispatcherConfig::default().policy(Some(name)),
    }
}

#[derive(Serialize)]
struct CompareMetrics<'a> {
    policies: Vec<(&'a str, &'a DispatchPolicy)>,
    /// Makespan of the first policy over makespan of the second.
    speedup: f64,
    report: &'a CompareReport,
    schedules: BTreeMap<&'a str, &'a ScheduleMetrics>,
}

/// Runs each named dispatcher on the configured simulated workload and
/// writes `metrics.json` plus one timeline per policy.
pub fn compare(
    loaded: &LoadedConfig,
    registry: &Registry,
    policies: &[String],
    out: Option<&Path>,
) -> Result<(CompareReport, Vec<PathBuf>), RunError> {
    let out = out.unwrap_or(&loaded.config.output_dir);
    let w = workload(loaded).ok_or_else(|| RunError::Usage("compare needs a simulated backend".into()))?;
    let named: Vec<(String, DispatchPolicy)> = policies
        .iter()
        .map(|p| {
            let name = dispatcher_name(p).to_string();
            let policy = policy_for(loaded, &name);
            (name, policy)
        })
        .collect();
    let mut seen = std::collections::BTreeSet::new();
    if let Some((dup, _)) = named.iter().find(|(n, _)| !seen.insert(n.clone())) {
        return Err(RunError::Usage(format!("policy `{dup}` listed twice")));
    }
    let dispatchers = DispatcherRegistry::with_builtins();
    let (report, runs) = compare_policies(&w, registry, &dispatchers, &named)?;
    let mut files = Vec::new();
    let unit_us = w.profile.time_unit_ms * 1000;
    for ((name, _), run) in named.iter().zip(&runs) {
        let trace = sim_trace(&run.report, unit_us);
        write(out.join(format!("timeline.{name}.trace.json")), &json_bytes(&trace), &mut files)?;
    }
    let first = report.policies[0].makespan as f64;
    let second = report.policies[1].makespan.max(1) as f64;
    let metrics = CompareMetrics {
        policies: named.iter().map(|(n, p)| (n.as_str(), p)).collect(),
        speedup: first / second,
        report: &report,
        schedules: named.iter().zip(&runs).map(|((n, _), r)| (n.as_str(), &r.metrics)).collect(),
    };
    write(out.join(METRICS_FILE), &json_bytes(&metrics), &mut files)?;
    Ok((report, files))
}

/// Reads a `metrics.json` value, for tests and tooling.
pub fn read_metrics(path: &Path) -> std::io::Result<Value> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(std::io::Error::other)
}
