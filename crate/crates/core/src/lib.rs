//! voltsim: a trace-driven simulator of a volunteer computing fleet where
//! machine-learned idle-time predictions drive an energy-aware task scheduler.
//!
//! The pipeline runs in five stages, each exchanging plain CSV/JSON artifacts:
//!
//! 1. [`tracegen`] synthesizes an interactive-user trace, a task trace, energy
//!    profiles, and a reboot schedule for a configurable fleet.
//! 2. [`preprocess`] splits idle periods on reboots, derives idle-gap targets,
//!    densifies sparse stretches, and extracts calendar features.
//! 3. [`predictors`] retrains a per-computer regression forest and multilayer
//!    perceptron each month and annotates the trace with predicted idle times.
//! 4. [`simulator`] replays sessions, reboots, and task arrivals through a
//!    deterministic event loop under a pluggable [`schedulers`] policy.
//! 5. [`analysis`] turns reports into overhead/energy comparisons.

pub mod analysis;
pub mod config;
pub mod forest;
pub mod io;
pub mod mlp;
pub mod model;
pub mod pipeline;
pub mod predictors;
pub mod preprocess;
pub mod schedulers;
pub mod simulator;
pub mod tracegen;

pub use model::{
    Attempt, AttemptOutcome, ClusterPolicy, ComputerId, DurationMs, EnergyProfile, Fleet,
    IdleRecord, InteractiveSession, ModelError, RebootSchedule, SessionKind, Task, TaskId, TimeMs,
    TraceViolation,
};
