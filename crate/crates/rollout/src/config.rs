//! Run configuration: one JSON document. See `configs/` and the README for
//! the schema.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rollout_core::agent::AgentConfig;
use rollout_core::backend::ScriptedPolicy;
use rollout_core::dispatch::{DispatchPolicy, DispatcherRegistry, PolicyKind};
use rollout_core::recorder::ExportLayout;
use rollout_core::sim::{CostProfile, ResourceModel, WorkloadSpec};
use rollout_core::registry::{Registry, RegistryBuilder};
use rollout_core::TaskSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskSource {
    Inline(Vec<TaskSpec>),
    /// JSONL file of task specs, relative to the config file.
    Path(PathBuf),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatcherConfig {
    pub name: Option<String>,
    pub pool_size: Option<u32>,
    pub queue_bounds: Option<[u32; 3]>,
    pub stage_workers: Option<[u32; 3]>,
    pub priority_key: Option<String>,
}

pub const DEFAULT_DISPATCHER: &str = "async_pipeline";

impl DispatcherConfig {
    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(DEFAULT_DISPATCHER)
    }

    /// Policy parameters with defaults filled in. `name` overrides the
    /// configured dispatcher name.
    pub fn policy(&self, name: Option<&str>) -> DispatchPolicy {
        let name = name.unwrap_or(self.name());
        let kind = [
            PolicyKind::AsyncBatch,
            PolicyKind::AsyncBatchBounded,
            PolicyKind::AsyncPipeline,
            PolicyKind::PriorityPipeline,
        ]
        .into_iter()
        .find(|k| k.name() == name)
        .unwrap_or(PolicyKind::AsyncPipeline);
        let d = DispatchPolicy::of(kind);
        DispatchPolicy {
            kind,
            pool_size: self.pool_size.unwrap_or(d.pool_size),
            queue_bounds: self.queue_bounds.unwrap_or(d.queue_bounds),
            stage_workers: self.stage_workers.or(d.stage_workers),
            priority_key: self.priority_key.clone().unwrap_or(d.priority_key),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatedBackend {
    pub profile: CostProfile,
    pub resources: ResourceModel,
    /// Explicit per-task scripts for the configured tasks.
    pub scripts: Option<ScriptedPolicy>,
    /// Generate tasks and scripts instead.
    pub workload: Option<WorkloadSpec>,
}

pub const DEFAULT_CONNECTION_CAP: u32 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendConfig {
    /// Base URL; `/v1/chat/completions` is appended unless already present.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub connection_cap: u32,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub request_logprobs: bool,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            auth_env: None,
            connection_cap: DEFAULT_CONNECTION_CAP,
            timeout_secs: 120,
            max_retries: 3,
            request_logprobs: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub simulated: Option<SimulatedBackend>,
    pub http: Option<HttpBackendConfig>,
}

/// Per-task limits applied to every task when set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub max_steps: Option<u32>,
    pub max_context_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tasks: Option<TaskSource>,
    pub rollouts_per_task: u32,
    pub dispatcher: DispatcherConfig,
    pub backend: BackendConfig,
    pub limits: Limits,
    pub agent: AgentConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub export_layouts: Vec<String>,
    /// Per-dispatcher parameters used by `compare`, keyed by dispatcher name.
    pub policies: BTreeMap<String, DispatcherConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tasks: None,
            rollouts_per_task: 1,
            dispatcher: DispatcherConfig::default(),
            backend: BackendConfig::default(),
            limits: Limits::default(),
            agent: AgentConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            export_layouts: vec![ExportLayout::MaskedSequence.as_str().into()],
            policies: BTreeMap::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
}

/// The backend a validated config selects.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Simulated { profile: CostProfile, resources: ResourceModel, scripts: ScriptedPolicy },
    Http(HttpBackendConfig),
}

/// A config with tasks loaded and every check passed.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub tasks: Vec<TaskSpec>,
    pub backend: Backend,
    pub layouts: Vec<ExportLayout>,
}

impl LoadedConfig {
    pub fn planned_trajectories(&self) -> usize {
        self.tasks.len() * self.config.rollouts_per_task as usize
    }
}

pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse { path: path.into(), detail: e.to_string() })
}

/// Reads, parses and validates the config at `path`.
pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
    let config = parse_config(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(config, base)
}

fn read_tasks(path: &Path) -> Result<Vec<TaskSpec>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("tasks: cannot read {}: {e}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("tasks: {} line {}: {e}", path.display(), i + 1)))
        .collect()
}

/// [`resolve_with`] against the builtin tools and verifiers.
pub fn resolve(config: RunConfig, base: &Path) -> Result<LoadedConfig, ConfigError> {
    resolve_with(config, base, &RegistryBuilder::with_builtins().freeze())
}

/// Validates `config`, collecting every violation. Relative task paths
/// resolve against `base`; task toolsets and verifiers must exist in
/// `registry`.
pub fn resolve_with(mut config: RunConfig, base: &Path, registry: &Registry) -> Result<LoadedConfig, ConfigError> {
    let mut errs = Vec::new();
    if config.rollouts_per_task < 1 {
        errs.push("rollouts_per_task must be at least 1".to_string());
    }
    let dispatchers = DispatcherRegistry::with_builtins();
    if !dispatchers.contains(config.dispatcher.name()) {
        errs.push(format!("dispatcher.name: unknown dispatcher `{}`", config.dispatcher.name()));
    }
    if let Err(e) = config.dispatcher.policy(None).validate() {
        errs.push(format!("dispatcher: {e}"));
    }
    for (name, d) in &config.policies {
        if !dispatchers.contains(name) {
            errs.push(format!("policies: unknown dispatcher `{name}`"));
        } else if let Err(e) = d.policy(Some(name)).validate() {
            errs.push(format!("policies.{name}: {e}"));
        }
    }
    if let Some(k) = &config.dispatcher.priority_key {
        if !["eval_cost", "num_tests"].contains(&k.as_str()) {
            errs.push(format!("dispatcher.priority_key: unknown cost estimator `{k}`"));
        }
    }
    if config.agent.sampling.max_new_tokens < 1 {
        errs.push("agent.sampling.max_new_tokens must be at least 1".into());
    }
    let t = config.agent.sampling.temperature;
    if t.is_nan() || t < 0.0 {
        errs.push("agent.sampling.temperature must be >= 0".into());
    }
    let mut layouts = Vec::new();
    if config.export_layouts.is_empty() {
        errs.push("export_layouts must name at least one layout".into());
    }
    for l in &config.export_layouts {
        match l.parse::<ExportLayout>() {
            Ok(x) if !layouts.contains(&x) => layouts.push(x),
            Ok(_) => errs.push(format!("export_layouts: `{l}` listed twice")),
            Err(e) => errs.push(format!("export_layouts: {e}")),
        }
    }

    let mut tasks = match &config.tasks {
        Some(TaskSource::Inline(t)) => t.clone(),
        Some(TaskSource::Path(p)) => read_tasks(&base.join(p)).unwrap_or_else(|e| {
            errs.push(e);
            Vec::new()
        }),
        None => Vec::new(),
    };

    let backend = match (&config.backend.simulated, &config.backend.http) {
        (Some(_), Some(_)) => {
            errs.push("backend: `simulated` and `http` are both set; choose exactly one".into());
            None
        }
        (None, None) => {
            errs.push("backend: one of `simulated` or `http` must be set".into());
            None
        }
        (Some(sim), None) => {
            if let Err(e) = sim.resources.validate() {
                errs.push(format!("backend.simulated.resources: {e}"));
            }
            if let Err(list) = sim.profile.validate() {
                errs.extend(list.into_iter().map(|e| format!("backend.simulated.profile.{e}")));
            }
            match (&sim.workload, &sim.scripts) {
                (Some(_), Some(_)) => {
                    errs.push("backend.simulated: `workload` and `scripts` are both set; choose one".into());
                    None
                }
                (Some(w), None) => {
                    if config.tasks.is_some() {
                        errs.push("tasks: must be omitted when backend.simulated.workload generates them".into());
                    }
                    if w.rollouts_per_task != config.rollouts_per_task {
                        // the generator makes one script variant per rollout
                        config.rollouts_per_task = config.rollouts_per_task.max(1);
                    }
                    let spec = WorkloadSpec { rollouts_per_task: config.rollouts_per_task, ..w.clone() };
                    let (generated, scripts) = spec.generate(config.seed);
                    tasks = generated;
                    Some(Backend::Simulated { profile: sim.profile.clone(), resources: sim.resources, scripts })
                }
                (None, Some(s)) => {
                    for t in &tasks {
                        if s.script(&t.task_id, 0).is_none() {
                            errs.push(format!("backend.simulated.scripts: no script for task `{}`", t.task_id));
                        }
                    }
                    Some(Backend::Simulated { profile: sim.profile.clone(), resources: sim.resources, scripts: s.clone() })
                }
                (None, None) => {
                    errs.push("backend.simulated: set `scripts` or `workload`".into());
                    None
                }
            }
        }
        (None, Some(http)) => {
            if http.endpoint.is_empty() {
                errs.push("backend.http.endpoint is required".into());
            }
            if http.model.is_empty() {
                errs.push("backend.http.model is required".into());
            }
            if http.connection_cap < 1 {
                errs.push("backend.http.connection_cap must be at least 1".into());
            }
            Some(Backend::Http(http.clone()))
        }
    };

    if tasks.is_empty() && !errs.iter().any(|e| e.starts_with("tasks")) {
        errs.push("tasks: at least one task is required".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in &mut tasks {
        if !seen.insert(t.task_id.clone()) {
            errs.push(format!("tasks: duplicate task_id `{}`", t.task_id));
        }
        if let Some(s) = config.limits.max_steps {
            t.max_steps = s;
        }
        if let Some(c) = config.limits.max_context_tokens {
            t.max_context_tokens = c;
        }
        if let Err(e) = registry.validate_task(t) {
            errs.push(format!("tasks: {e}"));
        }
    }

    match backend {
        Some(backend) if errs.is_empty() => Ok(LoadedConfig { config, tasks, backend, layouts }),
        _ => Err(ConfigError::Validation(errs)),
    }
}
