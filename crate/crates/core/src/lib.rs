//! Co-simulation kernel for carbon-aware computing experiments.
//!
//! A [`Simulation`] steps a single-bus microgrid (renewable producers,
//! metered compute nodes, one battery, the public grid) through historical
//! signal traces. The [`ControlPlane`] it exposes lets an external process
//! observe committed state and queue control directives while the
//! simulation runs.

pub mod consumers;
pub mod control;
pub mod error;
pub mod generation;
pub mod microgrid;
pub mod runlog;
pub mod signals;
pub mod sim;
pub mod storage;
pub mod time;

pub use control::{ControlError, ControlPlane, PublishedState};
pub use error::{Error, Result};
pub use runlog::RunSummary;
pub use sim::{ExecutionMode, Simulation, StepRecord, Subsystem};
pub use time::Timestamp;
