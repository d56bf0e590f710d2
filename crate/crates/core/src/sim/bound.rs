use serde::{Deserialize, Serialize};

use super::{Resource, ResourceModel};

/// Makespan floors that hold for any schedule of the given demands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowerBound {
    /// Total GPU demand spread over every slot.
    pub gpu_work: u64,
    /// Total CPU demand spread over every worker.
    pub cpu_work: u64,
    /// The longest single trajectory; its demands run one after another.
    pub longest_chain: u64,
    /// With admission slots held for a whole trajectory, total chain length
    /// spread over the slots.
    pub admission: Option<u64>,
}

impl LowerBound {
    pub fn value(&self) -> u64 {
        self.gpu_work.max(self.cpu_work).max(self.longest_chain).max(self.admission.unwrap_or(0))
    }
}

/// `jobs[j]` lists trajectory `j`'s demands in order. `pool` is the
/// admission slot count of a trajectory-level bounded policy.
pub fn critical_path_lower_bound(
    jobs: &[alloc::vec::Vec<(Resource, u64)>],
    resources: ResourceModel,
    pool: Option<u32>,
) -> LowerBound {
    let (mut cpu, mut gpu, mut longest, mut chains) = (0u64, 0u64, 0u64, 0u64);
    for j in jobs {
        let mut chain = 0;
        for &(r, d) in j {
            match r {
                Resource::Cpu => cpu += d,
                Resource::Gpu => gpu += d,
            }
            chain += d;
        }
        longest = longest.max(chain);
        chains += chain;
    }
    let slots = |n: u32| (n.max(1) as u64).min(jobs.len().max(1) as u64);
    LowerBound {
        gpu_work: gpu.div_ceil(resources.gpu_slots.max(1) as u64),
        cpu_work: cpu.div_ceil(resources.cpu_workers.max(1) as u64),
        longest_chain: longest,
        admission: pool.map(|p| chains.div_ceil(slots(p))),
    }
}
