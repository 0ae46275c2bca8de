//! Threshold sweeps over a fixed fleet and seed.

use pathwarden_core::policy::PolicySet;
use serde::{Deserialize, Serialize};

use crate::runner::{run_fleet, FleetOptions, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub theta_steer: f64,
    pub theta_block: f64,
    /// Run with every policy removed.
    #[serde(default)]
    pub empty_policy_set: bool,
}

impl SweepCell {
    pub fn new(theta_steer: f64, theta_block: f64) -> Self {
        Self { theta_steer, theta_block, empty_policy_set: false }
    }

    pub fn empty(theta_steer: f64, theta_block: f64) -> Self {
        Self { theta_steer, theta_block, empty_policy_set: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub cell: SweepCell,
    pub tasks: usize,
    pub sum_u: f64,
    pub sum_v_t: f64,
    pub steer: u64,
    pub block: u64,
    pub rejected_registrations: u64,
}

/// The grid used when none is given: the block-everything corner, a spread
/// of block thresholds at three steer thresholds, and the empty-set row.
pub fn default_grid() -> Vec<SweepCell> {
    let mut cells = vec![SweepCell::new(0.0, 0.0)];
    for ts in [0.05, 0.25, 0.5] {
        for tb in [0.05, 0.1, 0.25, 0.5, 0.75, 0.8, 0.9, 1.0] {
            if tb >= ts {
                cells.push(SweepCell::new(ts, tb));
            }
        }
    }
    cells.push(SweepCell::empty(0.5, 1.01));
    cells
}

pub fn sweep_thresholds(cells: &[SweepCell], fleet: &FleetOptions) -> Result<Vec<SweepRow>, SimError> {
    if cells.is_empty() {
        return Err(SimError::Invalid("sweep grid is empty".into()));
    }
    cells
        .iter()
        .map(|cell| {
            let mut opts = fleet.clone();
            opts.config.theta_steer = cell.theta_steer;
            opts.config.theta_block = cell.theta_block;
            opts.trail_dir = None;
            if cell.empty_policy_set {
                opts.policies = Some(PolicySet::empty("sim-empty"));
            }
            let run = run_fleet(&opts)?;
            let m = run.metrics;
            Ok(SweepRow {
                cell: *cell,
                tasks: m.tasks().count(),
                sum_u: m.sum_u,
                sum_v_t: m.sum_v_t,
                steer: m.interventions.steer,
                block: m.interventions.block,
                rejected_registrations: m.interventions.rejected_registrations,
            })
        })
        .collect()
}

/// Pairs of rows, same steer threshold and policy set, where the stricter
/// block threshold produced a larger sum of v_T.
pub fn monotonicity_violations(rows: &[SweepRow]) -> Vec<(SweepCell, SweepCell)> {
    let mut out = Vec::new();
    for a in rows {
        for b in rows {
            let comparable = a.cell.empty_policy_set == b.cell.empty_policy_set
                && a.cell.theta_steer == b.cell.theta_steer
                && a.cell.theta_block < b.cell.theta_block;
            if comparable && a.sum_v_t > b.sum_v_t {
                out.push((a.cell, b.cell));
            }
        }
    }
    out
}

pub fn render_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:>8} {:>8} {:>6} {:>6} {:>10} {:>10} {:>6} {:>6}\n", "θ_steer", "θ_block", "empty", "tasks", "Σu", "Σv_T", "steer", "block");
    for r in rows {
        s.push_str(&format!(
            "{:>8} {:>8} {:>6} {:>6} {:>10.4} {:>10.4} {:>6} {:>6}\n",
            r.cell.theta_steer, r.cell.theta_block, r.cell.empty_policy_set, r.tasks, r.sum_u, r.sum_v_t, r.steer, r.block
        ));
    }
    s
}
