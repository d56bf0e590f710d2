use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::{run_simulated, SimRun, SimulatedWorkload, WorkloadError};
use crate::dispatch::{DispatchPolicy, DispatcherRegistry};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub name: String,
    pub makespan: u64,
    pub mean_gpu_utilization: f64,
    pub gpu_utilization_variance: f64,
    pub mean_cpu_utilization: f64,
    pub trajectories: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub policies: Vec<PolicyResult>,
    /// `"a/b"` is how many times faster `a` finished than `b`.
    pub speedups: BTreeMap<String, f64>,
}

impl CompareReport {
    pub fn speedup(&self, fast: &str, slow: &str) -> Option<f64> {
        self.speedups.get(&format!("{fast}/{slow}")).copied()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompareError {
    #[error("compare needs at least two policies, got {0}")]
    TooFewPolicies(usize),
    #[error("policy `{name}`: {source}")]
    Dispatch { name: String, source: WorkloadError },
}

/// Runs every `(dispatcher name, policy)` on the same workload.
///
/// Returns the report plus each full run, in input order.
pub fn compare_policies(
    workload: &SimulatedWorkload,
    registry: &Registry,
    dispatchers: &DispatcherRegistry,
    policies: &[(String, DispatchPolicy)],
) -> Result<(CompareReport, Vec<SimRun>), CompareError> {
    if policies.len() < 2 {
        return Err(CompareError::TooFewPolicies(policies.len()));
    }
    let tokenizer = Arc::new(workload.tokenizer(registry));
    let mut runs = Vec::new();
    let mut results = Vec::new();
    for (name, policy) in policies {
        let run = run_simulated(workload, registry, &tokenizer, dispatchers, name, policy)
            .map_err(|source| CompareError::Dispatch { name: name.clone(), source })?;
        results.push(PolicyResult {
            name: name.clone(),
            makespan: run.metrics.makespan,
            mean_gpu_utilization: run.metrics.mean_gpu_utilization,
            gpu_utilization_variance: run.metrics.gpu_utilization_variance,
            mean_cpu_utilization: run.metrics.mean_cpu_utilization,
            trajectories: run.jobs.len(),
            failed: run.jobs.iter().filter(|j| j.is_failed()).count(),
        });
        runs.push(run);
    }
    let mut speedups = BTreeMap::new();
    for a in &results {
        for b in &results {
            if a.name != b.name && a.makespan > 0 {
                speedups.insert(format!("{}/{}", a.name, b.name), b.makespan as f64 / a.makespan as f64);
            }
        }
    }
    Ok((CompareReport { policies: results, speedups }, runs))
}
