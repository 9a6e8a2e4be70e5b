//! Scenario loading and run orchestration behind the `gridloop` binary.

pub mod run;
pub mod scenario;

pub use run::{describe, execute, RunError};
pub use scenario::{load, Overrides, Prepared, ScenarioError};
