//! Agent rollout orchestration core.
//!
//! A rollout runs as three stage jobs (runtime init, agent run, reward
//! evaluation). This crate holds everything that does not touch the outside
//! world: the tool registry and bundled tools, the step-wise agent loop, the
//! transition recorder and prefix packer, the stage dispatchers, and a
//! virtual-time simulator of CPU/GPU contention that drives them.
//!
//! It is `no_std` (with `alloc`); the `rollout` crate adds the HTTP backend,
//! the threaded live dispatcher, file formats and the CLI.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod agent;
pub mod backend;
pub mod builtin;
pub mod clock;
pub mod dispatch;
pub mod job;
pub mod message;
pub mod recorder;
pub mod registry;
pub mod sim;
pub mod tokenizer;
pub mod tool;

pub use agent::{AgentConfig, TrajectoryRunner, TrajectoryState};
pub use backend::{GenerationBackend, ScriptedBackend, ScriptedPolicy};
pub use dispatch::{DispatchPolicy, PolicyKind, Stage};
pub use registry::{Registry, RegistryBuilder, TaskSpec};
pub use tokenizer::{TokenId, Tokenizer};

/// SplitMix64 finalizer, used to derive independent seeds from ids.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
