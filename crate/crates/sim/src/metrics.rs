use pathwarden_core::decision::Outcome;
use pathwarden_core::model::{AgentId, TaskId, Terminal};
use pathwarden_core::policy::PolicyScore;
use serde::{Deserialize, Serialize};

/// Order-independent sum: values are added in ascending order.
pub fn sorted_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// One evaluation of a probed action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub name: String,
    pub task_id: TaskId,
    pub step_index: u64,
    pub outcome: Outcome,
    pub v_i: f64,
    pub per_policy: Vec<PolicyScore>,
    /// True for the re-evaluation after an approval.
    pub approved: bool,
    pub fail_closed: bool,
}

impl Probe {
    pub fn score(&self, policy_id: &str) -> Option<f64> {
        self.per_policy.iter().find(|s| s.policy_id == policy_id).map(|s| s.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub index: usize,
    pub agent_id: AgentId,
    pub template: String,
    pub task_id: Option<TaskId>,
    pub registered: bool,
    pub admitted: bool,
    pub terminal: Option<Terminal>,
    pub v_t: f64,
    pub utility: f64,
    pub steps: usize,
    pub probes: Vec<Probe>,
    /// Sub-tasks started by composite steps of this task.
    pub delegated: Vec<TaskOutcome>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionCounts {
    pub pass: u64,
    pub steer: u64,
    pub block: u64,
    pub fail_closed: u64,
    pub approvals_granted: u64,
    pub approvals_rejected: u64,
    pub deferred_admissions: u64,
    pub rejected_registrations: u64,
}

impl InterventionCounts {
    pub fn count(&mut self, outcome: Outcome, fail_closed: bool) {
        match outcome {
            Outcome::Pass => self.pass += 1,
            Outcome::Steer => self.steer += 1,
            Outcome::Block => self.block += 1,
        }
        if fail_closed {
            self.fail_closed += 1;
        }
    }
}

/// Fleet budget state after one simulation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub round: u64,
    pub time: String,
    pub active_tasks: usize,
    pub total_v_sum: f64,
    pub utilization: Option<f64>,
}

/// Per-run lists and their aggregates. Only top-level tasks enter `v_t` and
/// `u`; delegated sub-tasks are reported under their parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: String,
    pub seed: u64,
    pub tasks: Vec<TaskOutcome>,
    pub v_t: Vec<f64>,
    pub u: Vec<f64>,
}

impl RunMetrics {
    pub fn new(run: impl Into<String>, seed: u64, tasks: Vec<TaskOutcome>) -> Self {
        let v_t = tasks.iter().map(|t| t.v_t).collect();
        let u = tasks.iter().map(|t| t.utility).collect();
        Self { run: run.into(), seed, tasks, v_t, u }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetMetrics {
    pub runs: Vec<RunMetrics>,
    pub sum_v_t: f64,
    pub sum_u: f64,
    pub successful_v_t: f64,
    pub budget_b: f64,
    pub budget_trace: Vec<BudgetPoint>,
    pub interventions: InterventionCounts,
}

impl FleetMetrics {
    pub fn new(runs: Vec<RunMetrics>, budget_b: f64, budget_trace: Vec<BudgetPoint>, interventions: InterventionCounts) -> Self {
        let (sum_v_t, sum_u) = recompute(&runs);
        let successful_v_t = sorted_sum(
            runs.iter().flat_map(|r| r.tasks.iter()).filter(|t| t.terminal == Some(Terminal::Success)).map(|t| t.v_t),
        );
        Self { runs, sum_v_t, sum_u, successful_v_t, budget_b, budget_trace, interventions }
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskOutcome> {
        self.runs.iter().flat_map(|r| r.tasks.iter())
    }

    pub fn probes<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Probe> + 'a {
        fn walk<'b>(t: &'b TaskOutcome, out: &mut Vec<&'b Probe>) {
            out.extend(t.probes.iter());
            for d in &t.delegated {
                walk(d, out);
            }
        }
        let mut all = Vec::new();
        for t in self.tasks() {
            walk(t, &mut all);
        }
        all.into_iter().filter(move |p| p.name == name)
    }

    /// True if the stored sums equal a recomputation from the per-run lists.
    pub fn sums_consistent(&self) -> bool {
        let (v, u) = recompute(&self.runs);
        v.to_bits() == self.sum_v_t.to_bits() && u.to_bits() == self.sum_u.to_bits()
    }

    /// Canonical JSON: identical runs produce identical bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

fn recompute(runs: &[RunMetrics]) -> (f64, f64) {
    (
        sorted_sum(runs.iter().flat_map(|r| r.v_t.iter().copied())),
        sorted_sum(runs.iter().flat_map(|r| r.u.iter().copied())),
    )
}
