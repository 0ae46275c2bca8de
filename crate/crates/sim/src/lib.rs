//! Seeded fleet simulator for the pathwarden governance engine.
//!
//! Runs the three violation scenarios (prompt injection, exfiltration chain,
//! information barrier) and randomized fleets mixing them, and reports
//! fleet-level metrics.

pub mod metrics;
pub mod program;
pub mod runner;
pub mod scenarios;
pub mod sweep;

pub use metrics::{FleetMetrics, Probe, RunMetrics, TaskOutcome};
pub use runner::{
    replay_engine, run_fleet, run_scenario, ApprovalOracle, Expectation, FleetOptions, FleetRun, ScenarioOptions,
    ScenarioRun, SimError,
};
pub use sweep::{default_grid, sweep_thresholds, SweepCell, SweepRow};
