//! Simulation of active balancing for series lithium-ion stacks.
//!
//! The crate is organised bottom-up:
//!
//! - [`ecm`]: two-RC equivalent circuit cell model with exact stepping.
//! - [`rls`]: per-cell recursive least squares identification.
//! - [`flyback`]: closed-form piecewise-linear model of one multi-winding
//!   flyback balancing cycle.
//! - [`controller`]: one-step predictive choice among the 16 switch schedules.
//! - [`charger`]: stack CC-CV charger with an overvoltage guard.
//! - [`scenario`], [`sim`], [`summary`], [`trace_io`]: configuration, the
//!   closed-loop runner, run metrics and CSV traces.
//! - [`analysis`]: offline identification replay and plot series.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod charger;
pub mod controller;
pub mod ecm;
pub mod flyback;
pub mod rls;
pub mod scenario;
pub mod sim;
pub mod summary;
pub mod trace_io;
pub mod waveform;

pub use scenario::{Policy, ScenarioConfig};
pub use sim::{run_scenario, run_scenario_observed, ScenarioRun, SimError};
pub use summary::{summarize, Summary, Trace, TraceRecord};
