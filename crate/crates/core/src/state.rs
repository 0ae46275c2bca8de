//! Per-task governance state vector and the organization-wide shared ledger (Σ).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::rfc3339;
use crate::model::{AgentId, ExecutionPath, Step, TaskId, HUMAN_APPROVAL, PII_CHECK};
use crate::registry::{Barriers, RegistryError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("step has no output")]
    NotCompleted,
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("parent task {0} is closed")]
    ParentClosed(TaskId),
}

/// Compact sufficient statistic over a partial path `P_i`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStateVector {
    pub step_count: u64,
    pub sigma_max: u32,
    pub approval_done: bool,
    pub pii_check_done: bool,
    pub touched_categories: BTreeSet<String>,
    pub touched_barrier_sides: BTreeSet<String>,
}

impl TaskStateVector {
    /// Folds one completed step into the vector. Constant time in the path length.
    pub fn apply(&mut self, step: &Step, barriers: &Barriers) -> Result<(), StateError> {
        let output = step.output.as_ref().ok_or(StateError::NotCompleted)?;
        let categories: Vec<&String> =
            step.input.labels.categories.iter().chain(output.labels.categories.iter()).collect();
        let sides = barriers.side_tags(categories.iter().copied())?;

        self.step_count += 1;
        let sigma = step.input.labels.sensitivity.unwrap_or(0).max(output.labels.sensitivity.unwrap_or(0));
        self.sigma_max = self.sigma_max.max(sigma);
        match step.step_type.subkind.as_str() {
            HUMAN_APPROVAL => self.approval_done = true,
            PII_CHECK => self.pii_check_done = true,
            _ => {}
        }
        self.touched_categories.extend(categories.into_iter().cloned());
        self.touched_barrier_sides.extend(sides);
        Ok(())
    }

    /// Merges what a delegated child task touched into this (parent) vector.
    pub fn absorb_child(&mut self, child: &TaskStateVector) {
        self.sigma_max = self.sigma_max.max(child.sigma_max);
        self.touched_barrier_sides.extend(child.touched_barrier_sides.iter().cloned());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delegation {
    pub parent_task_id: TaskId,
    pub child_task_id: TaskId,
    pub parent_agent_id: AgentId,
    pub child_agent_id: AgentId,
    #[serde(with = "rfc3339")]
    pub timestamp: DateTime<Utc>,
}

/// Cross-agent governance facts. `version` increases on every content change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedLedger {
    pub org_id: String,
    pub version: u64,
    pub per_agent_barrier_sides: BTreeMap<AgentId, BTreeSet<String>>,
    pub per_task_sigma_max: BTreeMap<TaskId, u32>,
    pub delegations: Vec<Delegation>,
    pub active_barriers: Barriers,
}

impl SharedLedger {
    pub fn new(org_id: impl Into<String>, barriers: Barriers) -> Self {
        Self {
            org_id: org_id.into(),
            version: 0,
            per_agent_barrier_sides: BTreeMap::new(),
            per_task_sigma_max: BTreeMap::new(),
            delegations: Vec::new(),
            active_barriers: barriers,
        }
    }

    pub fn barrier_sides_of(&self, agent: &AgentId) -> Option<&BTreeSet<String>> {
        self.per_agent_barrier_sides.get(agent)
    }

    /// Records barrier sides for `agent`. Returns true if anything was new.
    pub fn add_barrier_sides(&mut self, agent: &AgentId, sides: &BTreeSet<String>) -> Result<bool, StateError> {
        for s in sides {
            if self.active_barriers.classify(s)?.is_none() {
                return Err(RegistryError::UndeclaredBarrier(s.clone()).into());
            }
        }
        if sides.is_empty() {
            return Ok(false);
        }
        let entry = self.per_agent_barrier_sides.entry(agent.clone()).or_default();
        let before = entry.len();
        entry.extend(sides.iter().cloned());
        let changed = entry.len() != before;
        if changed {
            self.version += 1;
        }
        Ok(changed)
    }

    /// Raises the recorded sigma maximum of `task`. Returns true on change.
    pub fn raise_task_sigma(&mut self, task: &TaskId, sigma: u32) -> bool {
        let current = self.per_task_sigma_max.get(task).copied();
        if current.is_some_and(|c| c >= sigma) {
            return false;
        }
        self.per_task_sigma_max.insert(task.clone(), sigma);
        self.version += 1;
        true
    }

    pub fn push_delegation(&mut self, d: Delegation) {
        self.delegations.push(d);
        self.version += 1;
    }

    pub fn delegation_of_child(&self, child: &TaskId) -> Option<&Delegation> {
        self.delegations.iter().find(|d| &d.child_task_id == child)
    }

    /// Export form: `{"version": k, "ledger": {...}}`.
    pub fn export(&self) -> serde_json::Value {
        serde_json::json!({ "version": self.version, "ledger": self })
    }
}

/// Applies a completed step to the task vector and the ledger.
///
/// Validation happens before any mutation, so an undeclared barrier tag leaves
/// both untouched. Returns whether the ledger content changed.
pub fn update_from_completed_step(
    vector: &mut TaskStateVector,
    ledger: &mut SharedLedger,
    agent: &AgentId,
    task: &TaskId,
    step: &Step,
) -> Result<bool, StateError> {
    let mut next = vector.clone();
    next.apply(step, &ledger.active_barriers)?;
    let step_sides = {
        let output = step.output.as_ref().ok_or(StateError::NotCompleted)?;
        ledger
            .active_barriers
            .side_tags(step.input.labels.categories.iter().chain(output.labels.categories.iter()))?
    };
    let mut changed = ledger.add_barrier_sides(agent, &step_sides)?;
    changed |= ledger.raise_task_sigma(task, next.sigma_max);
    *vector = next;
    Ok(changed)
}

/// Appends a delegation record; the parent path must still be open.
pub fn record_delegation(
    ledger: &mut SharedLedger,
    parent: &ExecutionPath,
    child_task: &TaskId,
    child_agent: &AgentId,
    timestamp: DateTime<Utc>,
) -> Result<(), StateError> {
    if parent.is_closed() {
        return Err(StateError::ParentClosed(parent.task_id.clone()));
    }
    ledger.push_delegation(Delegation {
        parent_task_id: parent.task_id.clone(),
        child_task_id: child_task.clone(),
        parent_agent_id: parent.agent_id.clone(),
        child_agent_id: child_agent.clone(),
        timestamp,
    });
    Ok(())
}

/// Propagates a closed child's sigma maximum and barrier sides into its parent.
///
/// The parent agent's ledger entry receives the child's barrier sides too, so
/// barrier policies see what the parent now holds.
pub fn propagate_child_close(
    parent_vector: &mut TaskStateVector,
    ledger: &mut SharedLedger,
    parent_agent: &AgentId,
    parent_task: &TaskId,
    child: &TaskStateVector,
) -> Result<bool, StateError> {
    parent_vector.absorb_child(child);
    let mut changed = ledger.add_barrier_sides(parent_agent, &child.touched_barrier_sides)?;
    changed |= ledger.raise_task_sigma(parent_task, parent_vector.sigma_max);
    Ok(changed)
}

/// Immutable view of the ledger at one version.
pub type LedgerSnapshot = Arc<SharedLedger>;

/// Single-writer, multi-reader holder of one organization's ledger.
///
/// Writes are serialized and copy-on-write; snapshots are `Arc`s that never
/// change after they are handed out.
#[derive(Debug)]
pub struct LedgerHandle {
    current: RwLock<LedgerSnapshot>,
    writer: Mutex<()>,
}

impl LedgerHandle {
    pub fn new(ledger: SharedLedger) -> Self {
        Self { current: RwLock::new(Arc::new(ledger)), writer: Mutex::new(()) }
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn version(&self) -> u64 {
        self.snapshot().version
    }

    /// Runs `f` against a private copy and publishes it if `f` succeeds.
    pub fn write<T, E>(&self, f: impl FnOnce(&mut SharedLedger) -> Result<T, E>) -> Result<T, E> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
        Ok(out)
    }
}

/// Snapshot of Σ per version, kept for replay.
#[derive(Debug, Clone, Default)]
pub struct SnapshotStore {
    by_version: BTreeMap<u64, LedgerSnapshot>,
}

impl SnapshotStore {
    pub fn insert(&mut self, snap: LedgerSnapshot) -> bool {
        let v = snap.version;
        if self.by_version.contains_key(&v) {
            return false;
        }
        self.by_version.insert(v, snap);
        true
    }

    pub fn get(&self, version: u64) -> Option<&LedgerSnapshot> {
        self.by_version.get(&version)
    }

    pub fn remove(&mut self, version: u64) -> Option<LedgerSnapshot> {
        self.by_version.remove(&version)
    }

    pub fn len(&self) -> usize {
        self.by_version.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_version.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LedgerSnapshot> {
        self.by_version.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContentLabels, Payload, StepKind, StepType, Terminal, UtilityRule};
    use crate::registry::BarrierDecl;

    fn barriers() -> Barriers {
        Barriers::new([BarrierDecl::new("dealwall", "advisory", "trading")]).unwrap()
    }

    fn done(subkind: &str, cats: &[&str], sigma: u32) -> Step {
        Step {
            step_type: StepType::new(StepKind::Deterministic, subkind),
            input: Payload::text("i").with_labels(ContentLabels::new(Vec::<String>::new(), Some(0))),
            output: Some(Payload::text("o").with_labels(ContentLabels::new(cats.iter().copied(), Some(sigma)))),
            sub_path_id: None,
        }
    }

    #[test]
    fn sigma_max_is_max() {
        let mut v = TaskStateVector { sigma_max: 1, ..Default::default() };
        let mut l = SharedLedger::new("org", barriers());
        update_from_completed_step(&mut v, &mut l, &"a".into(), &"t".into(), &done("db_read", &[], 3)).unwrap();
        assert_eq!(v.sigma_max, 3);
        update_from_completed_step(&mut v, &mut l, &"a".into(), &"t".into(), &done("db_read", &[], 2)).unwrap();
        assert_eq!(v.sigma_max, 3);
        assert_eq!(v.step_count, 2);
    }

    #[test]
    fn reserved_steps_set_flags() {
        let mut v = TaskStateVector::default();
        let mut l = SharedLedger::new("org", barriers());
        update_from_completed_step(&mut v, &mut l, &"a".into(), &"t".into(), &done(HUMAN_APPROVAL, &[], 0)).unwrap();
        assert!(v.approval_done && !v.pii_check_done);
        update_from_completed_step(&mut v, &mut l, &"a".into(), &"t".into(), &done(PII_CHECK, &[], 0)).unwrap();
        assert!(v.pii_check_done);
    }

    #[test]
    fn barrier_tag_reaches_ledger() {
        let mut v = TaskStateVector::default();
        let mut l = SharedLedger::new("org", barriers());
        let before = l.version;
        let a: AgentId = "adv".into();
        // A zero-sigma step touching only the barrier side: one write.
        update_from_completed_step(&mut v, &mut l, &a, &"t".into(), &done("deal_read", &["dealwall:advisory"], 0))
            .unwrap();
        assert!(l.barrier_sides_of(&a).unwrap().contains("dealwall:advisory"));
        assert!(v.touched_barrier_sides.contains("dealwall:advisory"));
        // Barrier side and the first per-task sigma entry.
        assert_eq!(l.version, before + 2);
    }

    #[test]
    fn unchanged_content_keeps_version() {
        let mut v = TaskStateVector::default();
        let mut l = SharedLedger::new("org", barriers());
        let a: AgentId = "adv".into();
        update_from_completed_step(&mut v, &mut l, &a, &"t".into(), &done("deal_read", &["dealwall:advisory"], 1))
            .unwrap();
        let k = l.version;
        let changed =
            update_from_completed_step(&mut v, &mut l, &a, &"t".into(), &done("deal_read", &["dealwall:advisory"], 1))
                .unwrap();
        assert!(!changed);
        assert_eq!(l.version, k);
    }

    #[test]
    fn undeclared_barrier_rejected_without_mutation() {
        let mut v = TaskStateVector::default();
        let mut l = SharedLedger::new("org", barriers());
        let err = update_from_completed_step(&mut v, &mut l, &"a".into(), &"t".into(), &done("x", &["chinese:wall"], 2))
            .unwrap_err();
        assert!(err.to_string().contains("undeclared barrier"));
        assert_eq!(v, TaskStateVector::default());
        assert_eq!(l.version, 0);
    }

    #[test]
    fn incomplete_step_rejected() {
        let mut s = done("x", &[], 0);
        s.output = None;
        let mut v = TaskStateVector::default();
        let mut l = SharedLedger::new("org", barriers());
        assert_eq!(
            update_from_completed_step(&mut v, &mut l, &"a".into(), &"t".into(), &s),
            Err(StateError::NotCompleted)
        );
    }

    #[test]
    fn snapshots_are_immutable() {
        let h = LedgerHandle::new(SharedLedger::new("org", barriers()));
        let s1 = h.snapshot();
        let s2 = h.snapshot();
        assert_eq!(s1, s2);
        h.write(|l| l.add_barrier_sides(&"a".into(), &["dealwall:trading".to_string()].into())).unwrap();
        assert_eq!(s1.version, 0);
        assert!(s1.per_agent_barrier_sides.is_empty());
        assert!(s1.version < h.version());
    }

    #[test]
    fn failed_write_is_not_published() {
        let h = LedgerHandle::new(SharedLedger::new("org", barriers()));
        let r = h.write(|l| l.add_barrier_sides(&"a".into(), &["nope:x".to_string()].into()));
        assert!(r.is_err());
        assert_eq!(h.version(), 0);
    }

    // Oracle for the propagation examples: the parent's expected sigma is the
    // plain max over both tasks' raw step labels.
    #[test]
    fn delegation_propagates_sigma_and_sides() {
        let mut l = SharedLedger::new("org", barriers());
        let parent = ExecutionPath::new("p".into(), "adv".into());
        let mut pv = TaskStateVector::default();
        let parent_steps = [done("deal_read", &["dealwall:advisory"], 1)];
        for s in &parent_steps {
            update_from_completed_step(&mut pv, &mut l, &"adv".into(), &"p".into(), s).unwrap();
        }
        record_delegation(&mut l, &parent, &"c".into(), &"res".into(), Utc::now()).unwrap();
        let mut cv = TaskStateVector::default();
        let child_steps = [done("market", &[], 4), done("trade_view", &["dealwall:trading"], 2)];
        for s in &child_steps {
            update_from_completed_step(&mut cv, &mut l, &"res".into(), &"c".into(), s).unwrap();
        }
        propagate_child_close(&mut pv, &mut l, &"adv".into(), &"p".into(), &cv).unwrap();

        let manual_max = parent_steps
            .iter()
            .chain(child_steps.iter())
            .map(|s| s.output.as_ref().unwrap().labels.sensitivity.unwrap())
            .max()
            .unwrap();
        assert_eq!(pv.sigma_max, manual_max);
        assert!(pv.sigma_max >= cv.sigma_max);
        assert!(pv.touched_barrier_sides.contains("dealwall:trading"));
        assert!(l.barrier_sides_of(&"adv".into()).unwrap().contains("dealwall:trading"));
        assert_eq!(l.delegation_of_child(&"c".into()).unwrap().parent_task_id, "p".into());
    }

    #[test]
    fn delegation_from_closed_parent_rejected() {
        let mut l = SharedLedger::new("org", barriers());
        let mut parent = ExecutionPath::new("p".into(), "adv".into());
        parent.close(Terminal::Success, UtilityRule::BinarySuccess).unwrap();
        assert_eq!(
            record_delegation(&mut l, &parent, &"c".into(), &"r".into(), Utc::now()),
            Err(StateError::ParentClosed("p".into()))
        );
    }
}
