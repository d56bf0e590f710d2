use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;
use rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mix64;

/// A duration distribution in time units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dist {
    Fixed(u64),
    Uniform { lo: u64, hi: u64 },
}

impl Default for Dist {
    fn default() -> Self {
        Dist::Fixed(0)
    }
}

impl Dist {
    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Fixed(v) => v as f64,
            Dist::Uniform { lo, hi } => (lo as f64 + hi as f64) / 2.0,
        }
    }

    pub fn max(&self) -> u64 {
        match *self {
            Dist::Fixed(v) => v,
            Dist::Uniform { hi, .. } => hi,
        }
    }

    fn validate(&self, what: &str, errs: &mut Vec<String>) {
        if let Dist::Uniform { lo, hi } = *self {
            if lo > hi {
                errs.push(format!("{what}: lo {lo} exceeds hi {hi}"));
            }
        }
    }
}

/// Why a cost is being drawn; keeps draws for different purposes independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Eval,
    Tool,
    Reset,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostOverride {
    pub init_cost: Option<Dist>,
    pub eval_cost: Option<Dist>,
    pub tool_cost: BTreeMap<String, Dist>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostProfile {
    /// Wall duration of one time unit, for tool timeouts and transition stamps.
    pub time_unit_ms: u64,
    pub init_cost: Dist,
    pub eval_cost: Dist,
    /// Per-tool call cost; tools not listed use `default_tool_cost`.
    pub tool_cost: BTreeMap<String, Dist>,
    pub default_tool_cost: Dist,
    pub prefill_per_token: f64,
    pub decode_per_token: f64,
    /// Keyed by task id.
    pub overrides: BTreeMap<String, CostOverride>,
    /// Later rollouts of a task reuse the first rollout's runtime and pay
    /// `reset_cost` instead of `init_cost`.
    pub reuse_runtime: bool,
    pub reset_cost: Dist,
}

impl Default for CostProfile {
    fn default() -> Self {
        Self {
            time_unit_ms: 1000,
            init_cost: Dist::Fixed(0),
            eval_cost: Dist::Fixed(0),
            tool_cost: BTreeMap::new(),
            default_tool_cost: Dist::Fixed(0),
            prefill_per_token: 0.0,
            decode_per_token: 0.0,
            overrides: BTreeMap::new(),
            reuse_runtime: false,
            reset_cost: Dist::Fixed(0),
        }
    }
}

impl CostProfile {
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.time_unit_ms == 0 {
            errs.push("time_unit_ms must be at least 1".into());
        }
        for (name, v) in [("prefill_per_token", self.prefill_per_token), ("decode_per_token", self.decode_per_token)] {
            if !v.is_finite() || v < 0.0 {
                errs.push(format!("{name} must be a finite non-negative number"));
            }
        }
        self.init_cost.validate("init_cost", &mut errs);
        self.eval_cost.validate("eval_cost", &mut errs);
        self.reset_cost.validate("reset_cost", &mut errs);
        self.default_tool_cost.validate("default_tool_cost", &mut errs);
        for (k, d) in &self.tool_cost {
            d.validate(&format!("tool_cost.{k}"), &mut errs);
        }
        for (task, o) in &self.overrides {
            if let Some(d) = &o.init_cost {
                d.validate(&format!("overrides.{task}.init_cost"), &mut errs);
            }
            if let Some(d) = &o.eval_cost {
                d.validate(&format!("overrides.{task}.eval_cost"), &mut errs);
            }
            for (k, d) in &o.tool_cost {
                d.validate(&format!("overrides.{task}.tool_cost.{k}"), &mut errs);
            }
        }
        if errs.is_empty() { Ok(()) } else { Err(errs) }
    }

    pub fn time_unit(&self) -> Duration {
        Duration::from_millis(self.time_unit_ms.max(1))
    }

    /// Whole time units covered by `d`, rounded up.
    pub fn units(&self, d: Duration) -> u64 {
        let unit = self.time_unit().as_nanos();
        d.as_nanos().div_ceil(unit) as u64
    }

    pub fn init_dist(&self, task_id: &str) -> Dist {
        self.overrides.get(task_id).and_then(|o| o.init_cost).unwrap_or(self.init_cost)
    }

    pub fn eval_dist(&self, task_id: &str) -> Dist {
        self.overrides.get(task_id).and_then(|o| o.eval_cost).unwrap_or(self.eval_cost)
    }

    pub fn tool_dist(&self, task_id: &str, tool: &str) -> Dist {
        self.overrides
            .get(task_id)
            .and_then(|o| o.tool_cost.get(tool))
            .or_else(|| self.tool_cost.get(tool))
            .copied()
            .unwrap_or(self.default_tool_cost)
    }

    /// Generation occupancy for one call, rounded half up.
    pub fn generation_cost(&self, input_tokens: usize, output_tokens: usize) -> u64 {
        let c = self.prefill_per_token * input_tokens as f64 + self.decode_per_token * output_tokens as f64;
        round_half_up(c)
    }

    /// Deterministic draw keyed by `(seed, traj, purpose, k)`, independent of
    /// the order in which draws are made.
    pub fn draw(dist: Dist, seed: u64, traj: usize, purpose: Purpose, k: u64) -> u64 {
        match dist {
            Dist::Fixed(v) => v,
            Dist::Uniform { lo, hi } => {
                let key = mix64(seed ^ mix64(traj as u64 ^ mix64(((purpose as u64) << 56) ^ k)));
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                let span = (hi - lo).wrapping_add(1);
                lo + if span == 0 { rng.next_u64() } else { rng.next_u64() % span }
            }
        }
    }
}

fn round_half_up(x: f64) -> u64 {
    // x is finite and non-negative here
    let f = x as u64;
    if x - f as f64 >= 0.5 { f + 1 } else { f }
}
