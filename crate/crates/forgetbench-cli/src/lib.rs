//! Command implementations behind the `forgetbench` binary, exposed as a
//! library so the full workflow is drivable from integration tests.

pub mod commands;
pub mod config;

pub use config::{Overrides, RunConfig, StrategyKind};
