//! Std companion of `rollout-core`: config loading, the OpenAI-compatible
//! HTTP backend, a threaded live dispatcher, artifact formats and the
//! runner behind the `rollout` binary.

pub mod config;
pub mod formats;
pub mod http;
pub mod live;
pub mod runner;

pub use config::{load_config, LoadedConfig, RunConfig};
pub use runner::{compare, run, RunSummary};
