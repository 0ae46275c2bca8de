//! The policy engine: registration checks, task admission under the fleet
//! budget, per-step evaluation, the approval lifecycle, and fleet accounting.
//!
//! Every decision is appended to the audit trail before it is returned. Any
//! failure inside the governance layer (evaluator error, timeout, trail write
//! failure) resolves to Block.
//!
//! Lock discipline: all mutable engine state sits behind one mutex, which is
//! released while policies are evaluated. A task being evaluated is marked
//! busy, so there is at most one in-flight evaluation per task.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use chrono::{DateTime, DurationRound, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditError, AuditRecord, AuditTrail, ContentTier, FailCause, ProposedMeta, RecordKind};
use crate::canonical::{digest_of, rfc3339, Digest};
use crate::decision::{Outcome, Thresholds};
use crate::model::{
    AgentId, AgentMetadata, AgentRecord, ContentLabels, ExecutionPath, Payload, ProposedAction, RequestId, Step,
    StepKind, StepType, TaskId, Terminal, UtilityRule, HUMAN_APPROVAL,
};
use crate::policy::{
    compose_enforced, evaluate, triggering, Phase, PolicyContext, PolicyError, PolicyMode, PolicyScore, PolicySet,
    PolicySpec, PolicyTemplate,
};
use crate::registry::{effective_input_labels, effective_output_labels, BarrierDecl, Barriers, ToolDescriptor, ToolRegistry};
use crate::state::{
    propagate_child_close, record_delegation, update_from_completed_step, LedgerHandle, LedgerSnapshot, SharedLedger,
    TaskStateVector,
};

/// Reason string attached to every fail-closed Block.
pub const FAIL_CLOSED: &str = "fail-closed";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown {kind}: {id}")]
    NotFound { kind: &'static str, id: String },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

impl EngineError {
    fn not_found(kind: &'static str, id: impl ToString) -> Self {
        EngineError::NotFound { kind, id: id.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FailMode {
    #[default]
    FailClosed,
}

fn default_true_one() -> u64 {
    1
}

fn default_timeout_ms() -> u64 {
    1000
}

fn default_ttl() -> u64 {
    24 * 3600
}

fn default_ceiling() -> u32 {
    4
}

fn default_org() -> String {
    "default".into()
}

fn default_context_steps() -> usize {
    10
}

fn default_steer() -> f64 {
    Thresholds::default().theta_steer
}

fn default_block() -> f64 {
    Thresholds::default().theta_block
}

fn default_budget() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default = "default_steer")]
    pub theta_steer: f64,
    #[serde(default = "default_block")]
    pub theta_block: f64,
    /// Fleet risk budget `B`.
    #[serde(default = "default_budget")]
    pub budget_b: f64,
    /// Sliding window for completed tasks in the fleet sum; `None` means since start.
    #[serde(default)]
    pub budget_window_secs: Option<u64>,
    #[serde(default)]
    pub fail_mode: FailMode,
    #[serde(default = "default_timeout_ms")]
    pub evaluation_timeout_ms: u64,
    #[serde(default = "default_ttl")]
    pub approval_ttl_secs: u64,
    /// Recheck the definition hash every N steps; 0 disables the recheck.
    #[serde(default = "default_true_one")]
    pub integrity_recheck_every: u64,
    #[serde(default = "default_ceiling")]
    pub sigma_ceiling: u32,
    #[serde(default = "default_org")]
    pub org_id: String,
    /// Never write Σ. Barrier policies then see an empty ledger.
    #[serde(default)]
    pub ablate_sigma: bool,
    #[serde(default)]
    pub utility: UtilityRule,
    /// How many recent steps an approval request shows the reviewer.
    #[serde(default = "default_context_steps")]
    pub approval_context_steps: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl EngineConfig {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds { theta_steer: self.theta_steer, theta_block: self.theta_block }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.thresholds().validate().map_err(|e| EngineError::Config(e.to_string()))?;
        if !self.budget_b.is_finite() || self.budget_b < 0.0 {
            return Err(EngineError::Config(format!("budget_b must be a non-negative real, got {}", self.budget_b)));
        }
        if self.sigma_ceiling == 0 {
            return Err(EngineError::Config("sigma_ceiling must be > 0".into()));
        }
        Ok(())
    }
}

/// The on-disk configuration: engine settings plus the files they point at.
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(flatten)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub policy_set_path: Option<PathBuf>,
    #[serde(default)]
    pub tool_registry_path: Option<PathBuf>,
    #[serde(default)]
    pub barriers: Vec<BarrierDecl>,
}

/// A fully loaded configuration.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub engine: EngineConfig,
    pub policies: Option<PolicySet>,
    pub tools: Option<ToolRegistry>,
    pub barriers: Barriers,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<LoadedConfig, EngineError> {
        let text = std::fs::read_to_string(path).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        let file: ConfigFile =
            serde_json::from_str(&text).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        file.resolve(base)
    }

    pub fn resolve(self, base: &Path) -> Result<LoadedConfig, EngineError> {
        self.engine.validate()?;
        let policies = match &self.policy_set_path {
            Some(p) => Some(PolicySet::load(&base.join(p)).map_err(|e| EngineError::Config(e.to_string()))?),
            None => None,
        };
        let tools = match &self.tool_registry_path {
            Some(p) => {
                let path = base.join(p);
                let text =
                    std::fs::read_to_string(&path).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
                let tools: ToolRegistry = serde_json::from_str(&text)
                    .map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?;
                Some(tools)
            }
            None => None,
        };
        let barriers = Barriers::new(self.barriers).map_err(|e| EngineError::Config(e.to_string()))?;
        Ok(LoadedConfig { engine: self.engine, policies, tools, barriers })
    }
}

/// Source of evaluation timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

/// Wall clock truncated to milliseconds, the precision the trail stores.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        let now = Utc::now();
        now.duration_trunc(TimeDelta::milliseconds(1)).unwrap_or(now)
    }
}

/// Manually advanced clock for simulations and tests.
#[derive(Debug)]
pub struct SimClock(Mutex<DateTime<Utc>>);

impl SimClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Mutex::new(start))
    }

    pub fn advance(&self, by: TimeDelta) {
        let mut t = self.0.lock().unwrap_or_else(|e| e.into_inner());
        *t += by;
    }

    pub fn set(&self, to: DateTime<Utc>) {
        *self.0.lock().unwrap_or_else(|e| e.into_inner()) = to;
    }
}

impl Clock for SimClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Evaluator faults for testing the fail-closed paths.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    /// The evaluator for this policy id raises instead of returning a score.
    pub fail_policy: Option<String>,
    /// Sleep this long inside every evaluation round.
    pub delay: Option<Duration>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Decision {
    pub task_id: TaskId,
    pub step_index: u64,
    pub outcome: Outcome,
    pub v_i: f64,
    pub per_policy: Vec<PolicyScore>,
    /// Triggering Enforced policy ids, or `fail-closed`.
    pub reason: Vec<String>,
    pub fail_closed: Option<FailCause>,
    pub approval_request: Option<RequestId>,
    pub approval_granted: Option<RequestId>,
    pub sigma_version: u64,
    /// Sequence number of the audit record, absent only if the trail was unwritable.
    pub audit_sequence_no: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegistrationOutcome {
    pub agent_id: AgentId,
    pub version: u64,
    pub accepted: bool,
    pub scores: Vec<PolicyScore>,
    pub reasons: Vec<String>,
    pub fail_closed: Option<FailCause>,
    pub audit_sequence_no: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum Admission {
    Admitted { task_id: TaskId },
    Deferred { ticket: String, position: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum TicketStatus {
    Queued { position: usize },
    Admitted { task_id: TaskId },
    Rejected { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApprovalStatus {
    Pending,
    Approved,
    Rejected,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Approved,
    Rejected,
}

/// Metadata view of a completed step shown to reviewers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSummary {
    pub index: u64,
    pub step_type: StepType,
    pub input_labels: ContentLabels,
    pub output_labels: Option<ContentLabels>,
    pub input_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalContext {
    pub recent_steps: Vec<StepSummary>,
    pub vector: TaskStateVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalRequest {
    pub request_id: RequestId,
    pub task_id: TaskId,
    pub agent_id: AgentId,
    pub proposed: ProposedAction,
    pub context: ApprovalContext,
    pub context_digest: Digest,
    pub steer_v_i: f64,
    pub reason: Vec<String>,
    #[serde(with = "rfc3339")]
    pub created_at: DateTime<Utc>,
    pub status: ApprovalStatus,
    pub resolver: Option<String>,
    #[serde(with = "rfc3339::option")]
    pub resolved_at: Option<DateTime<Utc>>,
}

/// Result of resolving an approval request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub request: ApprovalRequest,
    /// The re-evaluation of the proposed action (Approved only).
    pub decision: Option<Decision>,
    /// Set when the task was closed by the resolution.
    pub closed: Option<Closed>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Closed {
    pub terminal: Terminal,
    pub v_t: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedTask {
    pub task_id: TaskId,
    pub agent_id: AgentId,
    pub terminal: Terminal,
    pub v_t: f64,
    pub utility: f64,
    #[serde(with = "rfc3339")]
    pub closed_at: DateTime<Utc>,
    pub parent: Option<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReceipt {
    pub task_id: TaskId,
    pub step_index: u64,
    pub vector: TaskStateVector,
    pub sigma_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetReport {
    pub completed_tasks: usize,
    pub active_tasks: usize,
    /// Sum of v_T over completed tasks inside the budget window.
    pub completed_v_sum: f64,
    /// Sum of v_T over completed tasks that ended in Success.
    pub successful_v_sum: f64,
    pub active_v_sum: f64,
    pub total_v_sum: f64,
    pub utility_sum: f64,
    pub budget_b: f64,
    /// `total_v_sum / B`; `None` together with `utilization_infinite` when B = 0.
    pub utilization: Option<f64>,
    pub utilization_infinite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: TaskId,
    pub agent_id: AgentId,
    pub agent_version: u64,
    pub state: String,
    pub path: ExecutionPath,
    pub vector: TaskStateVector,
    pub last_v: f64,
    pub parent: Option<TaskId>,
    pub pending_approval: Option<RequestId>,
}

#[derive(Debug, Clone)]
enum TaskStatus {
    Ready,
    Evaluating,
    AwaitingOutput { proposed: ProposedAction, tool: ToolDescriptor, decision: Box<Decision> },
    AwaitingChild { proposed: ProposedAction, tool: ToolDescriptor, child: TaskId },
    Paused { request_id: RequestId },
    Closed,
}

impl TaskStatus {
    fn name(&self) -> &'static str {
        match self {
            TaskStatus::Ready => "ready",
            TaskStatus::Evaluating => "evaluating",
            TaskStatus::AwaitingOutput { .. } => "awaiting-output",
            TaskStatus::AwaitingChild { .. } => "awaiting-child",
            TaskStatus::Paused { .. } => "paused",
            TaskStatus::Closed => "closed",
        }
    }
}

#[derive(Debug, Clone)]
struct TaskRuntime {
    agent_version: u64,
    path: ExecutionPath,
    vector: TaskStateVector,
    status: TaskStatus,
    last_v: f64,
    parent: Option<TaskId>,
}

#[derive(Debug, Clone)]
struct AgentSlot {
    versions: BTreeMap<u64, AgentMetadata>,
    active: Option<u64>,
    running_hash: Digest,
}

#[derive(Debug, Clone)]
enum Ticket {
    Queued { agent_id: AgentId },
    Admitted(TaskId),
    Rejected(String),
}

struct Inner {
    agents: BTreeMap<AgentId, AgentSlot>,
    tasks: HashMap<TaskId, TaskRuntime>,
    completed: Vec<CompletedTask>,
    approvals: BTreeMap<RequestId, ApprovalRequest>,
    queue: VecDeque<String>,
    tickets: HashMap<String, Ticket>,
    trail: AuditTrail,
    /// Records that could not be written yet; flushed before the next append.
    backlog: Vec<AuditRecord>,
    next_task: u64,
    next_ticket: u64,
    next_request: u64,
    faults: FaultPlan,
}

pub struct Engine {
    config: EngineConfig,
    policies: Arc<PolicySet>,
    tools: Arc<ToolRegistry>,
    ledger: LedgerHandle,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).field("policies", &self.policies.version).finish()
    }
}

struct Prepared {
    agent: AgentMetadata,
    running_hash: Digest,
    vector: TaskStateVector,
    step_index: u64,
    integrity: bool,
    faults: FaultPlan,
}

struct Round {
    scores: Vec<PolicyScore>,
    fail: Option<FailCause>,
}

/// Policies evaluated for a proposed step: every PerStep policy in set order,
/// then the integrity recheck when it is due.
pub fn step_policies(set: &PolicySet, integrity: bool) -> Vec<&PolicySpec> {
    let mut out: Vec<&PolicySpec> = set.in_phase(Phase::PerStep).collect();
    if integrity {
        out.extend(set.policies.iter().filter(|p| matches!(p.template, PolicyTemplate::AgentIntegrity)));
    }
    out
}

/// Policies evaluated at registration.
pub fn registration_policies(set: &PolicySet) -> Vec<&PolicySpec> {
    set.in_phase(Phase::PreTask).collect()
}

/// Registration rejects iff some Enforced pre-task policy scores at least `theta_block`.
pub fn registration_outcome(scores: &[PolicyScore], thresholds: &Thresholds) -> Outcome {
    let reject = scores.iter().any(|s| s.mode == PolicyMode::Enforced && s.value >= thresholds.theta_block);
    if reject {
        Outcome::Block
    } else {
        Outcome::Pass
    }
}

/// Reason list of a fail-closed Block.
pub fn fail_reason(cause: &FailCause) -> Vec<String> {
    let mut r = vec![FAIL_CLOSED.to_string()];
    match cause {
        FailCause::EvaluationError { policy_id, .. } | FailCause::InjectedFault { policy_id } => r.push(policy_id.clone()),
        FailCause::Timeout { .. } => r.push("timeout".into()),
        FailCause::AuditWrite { .. } => r.push("audit-write".into()),
        FailCause::Unavailable { .. } => r.push("unavailable".into()),
    }
    r
}

fn policy_failure(policy_id: &str, err: &PolicyError) -> FailCause {
    FailCause::EvaluationError { policy_id: policy_id.to_string(), message: err.to_string() }
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        policies: PolicySet,
        tools: ToolRegistry,
        barriers: Barriers,
        trail: AuditTrail,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        policies.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        tools.validate(config.sigma_ceiling, &barriers).map_err(|e| EngineError::Config(e.to_string()))?;
        let ledger = LedgerHandle::new(SharedLedger::new(config.org_id.clone(), barriers));
        Ok(Self {
            config,
            policies: Arc::new(policies),
            tools: Arc::new(tools),
            ledger,
            clock,
            inner: Mutex::new(Inner {
                agents: BTreeMap::new(),
                tasks: HashMap::new(),
                completed: Vec::new(),
                approvals: BTreeMap::new(),
                queue: VecDeque::new(),
                tickets: HashMap::new(),
                trail,
                backlog: Vec::new(),
                next_task: 0,
                next_ticket: 0,
                next_request: 0,
                faults: FaultPlan::default(),
            }),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn tools(&self) -> &ToolRegistry {
        &self.tools
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_faults(&self, plan: FaultPlan) {
        self.lock().faults = plan;
    }

    pub fn sigma(&self) -> LedgerSnapshot {
        self.ledger.snapshot()
    }

    /// Runs `f` against the audit trail.
    pub fn with_trail<T>(&self, f: impl FnOnce(&AuditTrail) -> T) -> T {
        f(&self.lock().trail)
    }

    /// Runs `f` against the audit trail with write access (redaction).
    pub fn with_trail_mut<T>(&self, f: impl FnOnce(&mut AuditTrail) -> T) -> T {
        f(&mut self.lock().trail)
    }

    pub fn unwritten_records(&self) -> usize {
        self.lock().backlog.len()
    }

    fn draft(&self, kind: RecordKind, ts: DateTime<Utc>, agent: AgentMetadata) -> AuditRecord {
        AuditRecord::draft(kind, ts, agent, &self.policies.version, self.config.thresholds())
    }

    /// Writes `record`, first flushing any backlog so the trail stays ordered.
    fn persist(&self, inner: &mut Inner, record: AuditRecord, snap: Option<&LedgerSnapshot>) -> Result<u64, AuditError> {
        while !inner.backlog.is_empty() {
            let r = inner.backlog[0].clone();
            inner.trail.append(r)?;
            inner.backlog.remove(0);
        }
        if let Some(snap) = snap {
            inner.trail.ensure_snapshot(snap)?;
        }
        Ok(inner.trail.append(record)?.sequence_no)
    }

    /// Like [`Self::persist`] but queues the record when the trail is unwritable.
    fn persist_or_queue(&self, inner: &mut Inner, record: AuditRecord, snap: Option<&LedgerSnapshot>) -> Option<u64> {
        match self.persist(inner, record.clone(), snap) {
            Ok(seq) => Some(seq),
            Err(_) => {
                inner.backlog.push(record);
                None
            }
        }
    }

    // ---- registration -------------------------------------------------

    pub fn register_agent(&self, record: AgentRecord) -> Result<RegistrationOutcome, EngineError> {
        record.validate().map_err(|e| EngineError::Invalid(e.to_string()))?;
        let running_hash = record.running_hash().map_err(|e| EngineError::Invalid(e.to_string()))?;
        let agent = record.meta.clone();
        {
            let inner = self.lock();
            if let Some(slot) = inner.agents.get(&agent.agent_id) {
                if slot.versions.contains_key(&agent.version) {
                    return Err(EngineError::Conflict(format!(
                        "agent {} version {} is already registered",
                        agent.agent_id, agent.version
                    )));
                }
                if slot.versions.keys().next_back().is_some_and(|&v| v > agent.version) {
                    return Err(EngineError::Conflict(format!(
                        "agent {} has a newer version than {}",
                        agent.agent_id, agent.version
                    )));
                }
            }
        }
        let snap = self.ledger.snapshot();
        let now = self.clock.now();
        let vector = TaskStateVector::default();
        let ctx = PolicyContext {
            agent: &agent,
            running_definition_hash: running_hash,
            vector: &vector,
            proposed: None,
            ledger: &snap,
            clock: now,
            tools: &self.tools,
        };
        let faults = self.lock().faults.clone();
        let round = self.score(&registration_policies(&self.policies), &ctx, &faults);
        let thresholds = self.config.thresholds();
        let (v, outcome, reasons) = match &round.fail {
            Some(cause) => (1.0, Outcome::Block, fail_reason(cause)),
            None => {
                let v = compose_enforced(&round.scores).map_err(|e| EngineError::Invalid(e.to_string()))?;
                let outcome = registration_outcome(&round.scores, &thresholds);
                (v, outcome, triggering(&round.scores))
            }
        };

        let mut rec = self.draft(RecordKind::Registration, now, agent.clone());
        rec.running_definition_hash = Some(running_hash);
        rec.vector_snapshot = Some(vector.clone());
        rec.sigma_version = Some(snap.version);
        rec.per_policy_scores = round.scores.clone();
        rec.v_i = v;
        rec.outcome = Some(outcome);
        rec.reason = reasons.clone();
        rec.integrity_checked = true;
        rec.fail_closed = round.fail.clone();

        let mut inner = self.lock();
        let (seq, fail, outcome, reasons) = match self.persist(&mut inner, rec.clone(), Some(&snap)) {
            Ok(seq) => (Some(seq), round.fail, outcome, reasons),
            Err(e) => {
                let cause = FailCause::AuditWrite { message: e.to_string() };
                let mut failed = rec;
                failed.fail_closed = Some(cause.clone());
                failed.outcome = Some(Outcome::Block);
                failed.v_i = 1.0;
                failed.reason = fail_reason(&cause);
                inner.backlog.push(failed);
                (None, Some(cause.clone()), Outcome::Block, fail_reason(&cause))
            }
        };
        let accepted = outcome != Outcome::Block;
        if accepted {
            let slot = inner.agents.entry(agent.agent_id.clone()).or_insert_with(|| AgentSlot {
                versions: BTreeMap::new(),
                active: None,
                running_hash,
            });
            slot.versions.insert(agent.version, agent.clone());
            slot.active = Some(agent.version);
            slot.running_hash = running_hash;
        }
        Ok(RegistrationOutcome {
            agent_id: agent.agent_id,
            version: agent.version,
            accepted,
            scores: round.scores,
            reasons,
            fail_closed: fail,
            audit_sequence_no: seq,
        })
    }

    /// Reports the definition the agent is actually running. Returns its hash.
    pub fn report_running_definition(
        &self,
        agent_id: &AgentId,
        definition: &serde_json::Value,
    ) -> Result<Digest, EngineError> {
        let hash = crate::canonical::canonical_hash_value(definition).map_err(|e| EngineError::Invalid(e.to_string()))?;
        let mut inner = self.lock();
        let slot = inner.agents.get_mut(agent_id).ok_or_else(|| EngineError::not_found("agent", agent_id))?;
        slot.running_hash = hash;
        Ok(hash)
    }

    pub fn retire_agent(&self, agent_id: &AgentId) -> Result<(), EngineError> {
        let mut inner = self.lock();
        let slot = inner.agents.get_mut(agent_id).ok_or_else(|| EngineError::not_found("agent", agent_id))?;
        slot.active = None;
        Ok(())
    }

    pub fn agent(&self, agent_id: &AgentId) -> Option<AgentMetadata> {
        let inner = self.lock();
        let slot = inner.agents.get(agent_id)?;
        slot.active.and_then(|v| slot.versions.get(&v).cloned())
    }

    // ---- admission ----------------------------------------------------

    fn active_sum(inner: &Inner) -> f64 {
        let mut vs: Vec<f64> =
            inner.tasks.values().filter(|t| !matches!(t.status, TaskStatus::Closed)).map(|t| t.last_v).collect();
        vs.sort_by(f64::total_cmp);
        vs.iter().sum()
    }

    fn active_version(inner: &Inner, agent_id: &AgentId) -> Result<u64, EngineError> {
        let slot = inner.agents.get(agent_id).ok_or_else(|| EngineError::not_found("agent", agent_id))?;
        slot.active.ok_or_else(|| EngineError::Rejected(format!("agent {agent_id} is retired")))
    }

    fn create_task(&self, inner: &mut Inner, agent_id: &AgentId, version: u64, parent: Option<TaskId>) -> TaskId {
        inner.next_task += 1;
        let task_id = TaskId::new(format!("task-{:06}", inner.next_task));
        inner.tasks.insert(
            task_id.clone(),
            TaskRuntime {
                agent_version: version,
                path: ExecutionPath::new(task_id.clone(), agent_id.clone()),
                vector: TaskStateVector::default(),
                status: TaskStatus::Ready,
                last_v: 0.0,
                parent,
            },
        );
        task_id
    }

    /// Admits a task for `agent_id`, or defers it while the active sum exceeds B.
    pub fn admit_task(&self, agent_id: &AgentId) -> Result<Admission, EngineError> {
        self.expire_approvals();
        let mut inner = self.lock();
        let version = Self::active_version(&inner, agent_id)?;
        if inner.queue.is_empty() && Self::active_sum(&inner) <= self.config.budget_b {
            let task_id = self.create_task(&mut inner, agent_id, version, None);
            return Ok(Admission::Admitted { task_id });
        }
        inner.next_ticket += 1;
        let ticket = format!("adm-{:06}", inner.next_ticket);
        inner.queue.push_back(ticket.clone());
        inner.tickets.insert(ticket.clone(), Ticket::Queued { agent_id: agent_id.clone() });
        let position = inner.queue.len();
        Ok(Admission::Deferred { ticket, position })
    }

    pub fn ticket_status(&self, ticket: &str) -> Result<TicketStatus, EngineError> {
        let inner = self.lock();
        match inner.tickets.get(ticket) {
            None => Err(EngineError::not_found("ticket", ticket)),
            Some(Ticket::Admitted(t)) => Ok(TicketStatus::Admitted { task_id: t.clone() }),
            Some(Ticket::Rejected(r)) => Ok(TicketStatus::Rejected { reason: r.clone() }),
            Some(Ticket::Queued { .. }) => {
                let position = inner.queue.iter().position(|t| t == ticket).map_or(0, |p| p + 1);
                Ok(TicketStatus::Queued { position })
            }
        }
    }

    /// Admits queued tasks in FIFO order while the budget allows.
    fn drain_queue(&self, inner: &mut Inner) {
        while let Some(ticket) = inner.queue.front().cloned() {
            let Some(Ticket::Queued { agent_id }) = inner.tickets.get(&ticket).cloned() else {
                inner.queue.pop_front();
                continue;
            };
            match Self::active_version(inner, &agent_id) {
                Err(e) => {
                    inner.queue.pop_front();
                    inner.tickets.insert(ticket, Ticket::Rejected(e.to_string()));
                }
                Ok(version) => {
                    if Self::active_sum(inner) > self.config.budget_b {
                        break;
                    }
                    inner.queue.pop_front();
                    let task_id = self.create_task(inner, &agent_id, version, None);
                    inner.tickets.insert(ticket, Ticket::Admitted(task_id));
                }
            }
        }
    }

    // ---- per-step evaluation -----------------------------------------

    fn score(&self, policies: &[&PolicySpec], ctx: &PolicyContext<'_>, faults: &FaultPlan) -> Round {
        let started = Instant::now();
        let mut scores = Vec::with_capacity(policies.len());
        if let Some(d) = faults.delay {
            std::thread::sleep(d);
        }
        for p in policies {
            if faults.fail_policy.as_deref() == Some(p.policy_id.as_str()) {
                return Round { scores, fail: Some(FailCause::InjectedFault { policy_id: p.policy_id.clone() }) };
            }
            match evaluate(p, ctx) {
                Ok(s) => scores.push(s),
                Err(e) => return Round { scores, fail: Some(policy_failure(&p.policy_id, &e)) },
            }
        }
        let elapsed = started.elapsed();
        if elapsed > Duration::from_millis(self.config.evaluation_timeout_ms) {
            return Round { scores, fail: Some(FailCause::Timeout { elapsed_ms: elapsed.as_millis() as u64 }) };
        }
        Round { scores, fail: None }
    }

    /// Evaluates the proposed next action of `task_id` and applies δ.
    pub fn evaluate_step(&self, task_id: &TaskId, proposed: ProposedAction) -> Result<Decision, EngineError> {
        self.expire_approvals();
        self.run_evaluation(task_id, proposed, None)
    }

    fn prepare(&self, inner: &mut Inner, task_id: &TaskId, proposed: &ProposedAction) -> Result<Prepared, EngineError> {
        let every = self.config.integrity_recheck_every;
        let faults = inner.faults.clone();
        let task = inner.tasks.get(task_id).ok_or_else(|| EngineError::not_found("task", task_id))?;
        let agent_id = task.path.agent_id.clone();
        let slot = inner.agents.get(&agent_id).ok_or_else(|| EngineError::not_found("agent", &agent_id))?;
        let agent = slot
            .versions
            .get(&task.agent_version)
            .cloned()
            .ok_or_else(|| EngineError::not_found("agent version", task.agent_version))?;
        let running_hash = slot.running_hash;
        let vector = task.vector.clone();
        let step_index = task.path.len() as u64;
        proposed.step_type.validate().map_err(|e| EngineError::Invalid(e.to_string()))?;
        let task = inner.tasks.get_mut(task_id).expect("looked up above");
        task.status = TaskStatus::Evaluating;
        Ok(Prepared {
            agent,
            running_hash,
            integrity: every > 0 && vector.step_count % every == 0,
            vector,
            step_index,
            faults,
        })
    }

    fn run_evaluation(
        &self,
        task_id: &TaskId,
        proposed: ProposedAction,
        approval: Option<RequestId>,
    ) -> Result<Decision, EngineError> {
        let prep = {
            let mut inner = self.lock();
            let task = inner.tasks.get(task_id).ok_or_else(|| EngineError::not_found("task", task_id))?;
            if approval.is_none() {
                match &task.status {
                    TaskStatus::Ready => {}
                    TaskStatus::AwaitingOutput { proposed: p, decision, .. }
                        if *p == proposed && decision.approval_granted.is_some() =>
                    {
                        return Ok((**decision).clone());
                    }
                    other => {
                        return Err(EngineError::Conflict(format!("task {task_id} is {}", other.name())));
                    }
                }
            }
            self.prepare(&mut inner, task_id, &proposed)?
        };

        let snap = self.ledger.snapshot();
        let now = self.clock.now();
        let tool = self.tools.resolve(&proposed.step_type.subkind).ok();
        let ctx = PolicyContext {
            agent: &prep.agent,
            running_definition_hash: prep.running_hash,
            vector: &prep.vector,
            proposed: Some(&proposed),
            ledger: &snap,
            clock: now,
            tools: &self.tools,
        };
        let round = self.score(&step_policies(&self.policies, prep.integrity), &ctx, &prep.faults);
        let thresholds = self.config.thresholds();
        let approved = approval.is_some();
        let (mut v, mut outcome, mut reason, mut fail) = match round.fail.clone() {
            Some(cause) => (1.0, Outcome::Block, fail_reason(&cause), Some(cause)),
            None => match compose_enforced(&round.scores) {
                Ok(v) => (v, thresholds.decide(v, approved), triggering(&round.scores), None),
                Err(e) => {
                    let cause = FailCause::EvaluationError { policy_id: "composition".into(), message: e.to_string() };
                    (1.0, Outcome::Block, fail_reason(&cause), Some(cause))
                }
            },
        };

        let mut inner = self.lock();
        let request_id = (outcome == Outcome::Steer).then(|| {
            inner.next_request += 1;
            RequestId::new(format!("apr-{:06}", inner.next_request))
        });

        let mut rec = self.draft(RecordKind::StepDecision, now, prep.agent.clone());
        rec.running_definition_hash = Some(prep.running_hash);
        rec.task_id = Some(task_id.clone());
        rec.step_index = Some(prep.step_index);
        rec.vector_snapshot = Some(prep.vector.clone());
        rec.sigma_version = Some(snap.version);
        rec.proposed = Some(ProposedMeta { step_type: proposed.step_type.clone(), tool: tool.clone() });
        rec.content = Some(ContentTier { proposed_input: proposed.input.clone() });
        rec.per_policy_scores = round.scores.clone();
        rec.v_i = v;
        rec.outcome = Some(outcome);
        rec.reason = reason.clone();
        rec.approval_granted = approval.clone();
        rec.integrity_checked = prep.integrity;
        rec.fail_closed = fail.clone();
        if let Some(r) = &request_id {
            rec.event = Some(serde_json::json!({ "approval_request": r }));
        }

        let seq = match self.persist(&mut inner, rec.clone(), Some(&snap)) {
            Ok(seq) => Some(seq),
            Err(e) => {
                let cause = FailCause::AuditWrite { message: e.to_string() };
                v = 1.0;
                outcome = Outcome::Block;
                reason = fail_reason(&cause);
                fail = Some(cause.clone());
                let mut failed = rec;
                failed.v_i = v;
                failed.outcome = Some(outcome);
                failed.reason = reason.clone();
                failed.fail_closed = Some(cause);
                failed.event = None;
                self.persist_or_queue(&mut inner, failed, Some(&snap))
            }
        };
        let request_id = if outcome == Outcome::Steer { request_id } else { None };

        let decision = Decision {
            task_id: task_id.clone(),
            step_index: prep.step_index,
            outcome,
            v_i: v,
            per_policy: round.scores,
            reason: reason.clone(),
            fail_closed: fail,
            approval_request: request_id.clone(),
            approval_granted: approval,
            sigma_version: snap.version,
            audit_sequence_no: seq,
        };

        let task = inner.tasks.get_mut(task_id).expect("task cannot disappear while evaluating");
        task.last_v = v;
        match outcome {
            Outcome::Pass => {
                let desc = tool.unwrap_or_else(|| ToolDescriptor::new(&proposed.step_type.subkind, proposed.step_type.kind, 0));
                task.status = TaskStatus::AwaitingOutput { proposed, tool: desc, decision: Box::new(decision.clone()) };
            }
            Outcome::Steer => {
                let request_id = request_id.expect("steer creates a request");
                let context = self.approval_context(task);
                let context_digest = digest_of(&context).map_err(AuditError::from)?;
                let req = ApprovalRequest {
                    request_id: request_id.clone(),
                    task_id: task_id.clone(),
                    agent_id: task.path.agent_id.clone(),
                    proposed,
                    context,
                    context_digest,
                    steer_v_i: v,
                    reason,
                    created_at: now,
                    status: ApprovalStatus::Pending,
                    resolver: None,
                    resolved_at: None,
                };
                task.status = TaskStatus::Paused { request_id: request_id.clone() };
                inner.approvals.insert(request_id, req);
            }
            Outcome::Block => {
                self.close_locked(&mut inner, task_id, Terminal::Failure, now, Some("blocked"));
            }
        }
        Ok(decision)
    }

    fn approval_context(&self, task: &TaskRuntime) -> ApprovalContext {
        let steps = &task.path.steps;
        let start = steps.len().saturating_sub(self.config.approval_context_steps);
        let recent_steps = steps[start..]
            .iter()
            .enumerate()
            .map(|(i, s)| StepSummary {
                index: (start + i) as u64,
                step_type: s.step_type.clone(),
                input_labels: s.input.labels.clone(),
                output_labels: s.output.as_ref().map(|o| o.labels.clone()),
                input_digest: Digest::of(&s.input.data),
            })
            .collect();
        ApprovalContext { recent_steps, vector: task.vector.clone() }
    }

    /// Finalizes the step that passed with its output and updates the vector and Σ.
    pub fn report_step_output(&self, task_id: &TaskId, output: Payload) -> Result<StepReceipt, EngineError> {
        let mut inner = self.lock();
        let task = inner.tasks.get(task_id).ok_or_else(|| EngineError::not_found("task", task_id))?;
        let TaskStatus::AwaitingOutput { proposed, tool, .. } = &task.status else {
            return Err(EngineError::Conflict(format!("task {task_id} has no step awaiting output ({})", task.status.name())));
        };
        if proposed.step_type.kind == StepKind::Composite {
            return Err(EngineError::Conflict(format!("task {task_id}: a composite step completes through delegation")));
        }
        let input = proposed.input.clone().with_labels(effective_input_labels(tool, &proposed.input));
        let out_labels = effective_output_labels(tool, &output, self.config.sigma_ceiling);
        let step = Step {
            step_type: proposed.step_type.clone(),
            input,
            output: Some(output.with_labels(out_labels)),
            sub_path_id: None,
        };
        let index = task.path.len() as u64;
        let agent_id = task.path.agent_id.clone();
        let vector = self.complete_step(&mut inner, task_id, &agent_id, step)?;
        Ok(StepReceipt { task_id: task_id.clone(), step_index: index, vector, sigma_version: self.ledger.version() })
    }

    /// Validates `step`, folds it into the vector and Σ, appends it and readies the task.
    fn complete_step(
        &self,
        inner: &mut Inner,
        task_id: &TaskId,
        agent_id: &AgentId,
        step: Step,
    ) -> Result<TaskStateVector, EngineError> {
        step.validate(self.config.sigma_ceiling).map_err(|e| EngineError::Invalid(e.to_string()))?;
        let task = inner.tasks.get_mut(task_id).ok_or_else(|| EngineError::not_found("task", task_id))?;
        let mut vector = task.vector.clone();
        if self.config.ablate_sigma {
            let barriers = self.ledger.snapshot().active_barriers.clone();
            vector.apply(&step, &barriers).map_err(|e| EngineError::Invalid(e.to_string()))?;
        } else {
            self.ledger
                .write(|l| update_from_completed_step(&mut vector, l, agent_id, task_id, &step))
                .map_err(|e| EngineError::Invalid(e.to_string()))?;
        }
        task.path.append_step(step).map_err(|e| EngineError::Conflict(e.to_string()))?;
        task.vector = vector.clone();
        task.status = TaskStatus::Ready;
        Ok(vector)
    }

    /// Starts the delegated sub-task of a passed composite step.
    pub fn delegate(&self, parent_task: &TaskId, child_agent: &AgentId) -> Result<TaskId, EngineError> {
        let mut inner = self.lock();
        let version = Self::active_version(&inner, child_agent)?;
        let parent = inner.tasks.get(parent_task).ok_or_else(|| EngineError::not_found("task", parent_task))?;
        let TaskStatus::AwaitingOutput { proposed, tool, .. } = &parent.status else {
            return Err(EngineError::Conflict(format!("task {parent_task} has no passed step to delegate")));
        };
        if proposed.step_type.kind != StepKind::Composite {
            return Err(EngineError::Conflict(format!("task {parent_task}: the passed step is not composite")));
        }
        let (proposed, tool) = (proposed.clone(), tool.clone());
        let parent_path = parent.path.clone();
        let child = self.create_task(&mut inner, child_agent, version, Some(parent_task.clone()));
        if !self.config.ablate_sigma {
            let now = self.clock.now();
            self.ledger
                .write(|l| record_delegation(l, &parent_path, &child, child_agent, now))
                .map_err(|e| EngineError::Conflict(e.to_string()))?;
        }
        let parent = inner.tasks.get_mut(parent_task).expect("looked up above");
        parent.status = TaskStatus::AwaitingChild { proposed, tool, child: child.clone() };
        Ok(child)
    }

    /// Folds a closed child into its waiting parent and completes the composite step.
    fn finish_child(&self, inner: &mut Inner, child_id: &TaskId, parent_id: &TaskId) {
        let Some(child) = inner.tasks.get(child_id) else { return };
        let child_vector = child.vector.clone();
        let terminal = child.path.terminal;
        let v_t = child.last_v;
        let Some(parent) = inner.tasks.get(parent_id) else { return };
        let TaskStatus::AwaitingChild { proposed, tool, child } = &parent.status else { return };
        if child != child_id {
            return;
        }
        let parent_agent = parent.path.agent_id.clone();
        let input = proposed.input.clone().with_labels(effective_input_labels(tool, &proposed.input));
        let summary = serde_json::json!({ "child_task_id": child_id, "terminal": terminal, "v_t": v_t });
        let output = Payload::new(
            summary.to_string(),
            ContentLabels {
                categories: child_vector.touched_categories.clone(),
                sensitivity: Some(child_vector.sigma_max),
            },
        );
        let step =
            Step { step_type: proposed.step_type.clone(), input, output: Some(output), sub_path_id: Some(child_id.clone()) };
        if self.complete_step(inner, parent_id, &parent_agent, step).is_err() {
            return;
        }
        let parent = inner.tasks.get_mut(parent_id).expect("completed above");
        if self.config.ablate_sigma {
            parent.vector.absorb_child(&child_vector);
        } else {
            let mut vector = parent.vector.clone();
            if self
                .ledger
                .write(|l| propagate_child_close(&mut vector, l, &parent_agent, parent_id, &child_vector))
                .is_ok()
            {
                parent.vector = vector;
            }
        }
    }

    // ---- approvals ----------------------------------------------------

    pub fn pending_approvals(&self) -> Vec<ApprovalRequest> {
        self.expire_approvals();
        self.lock().approvals.values().filter(|r| r.status == ApprovalStatus::Pending).cloned().collect()
    }

    pub fn approval(&self, request_id: &RequestId) -> Option<ApprovalRequest> {
        self.lock().approvals.get(request_id).cloned()
    }

    /// Expires pending requests older than the configured TTL; they count as rejected.
    pub fn expire_approvals(&self) -> usize {
        let now = self.clock.now();
        let ttl = TimeDelta::seconds(self.config.approval_ttl_secs as i64);
        let mut inner = self.lock();
        let expired: Vec<RequestId> = inner
            .approvals
            .values()
            .filter(|r| r.status == ApprovalStatus::Pending && now - r.created_at >= ttl)
            .map(|r| r.request_id.clone())
            .collect();
        for id in &expired {
            let _ = self.finish_rejection(&mut inner, id, ApprovalStatus::Expired, None, now);
        }
        expired.len()
    }

    fn resolution_record(&self, inner: &Inner, req: &ApprovalRequest, now: DateTime<Utc>) -> Option<AuditRecord> {
        let task = inner.tasks.get(&req.task_id)?;
        let agent = inner.agents.get(&req.agent_id)?.versions.get(&task.agent_version)?.clone();
        let mut rec = self.draft(RecordKind::ApprovalResolution, now, agent);
        rec.task_id = Some(req.task_id.clone());
        rec.step_index = Some(task.path.len() as u64);
        rec.vector_snapshot = Some(task.vector.clone());
        rec.v_i = req.steer_v_i;
        rec.event = Some(serde_json::json!({
            "request_id": req.request_id,
            "status": req.status,
            "resolver": req.resolver,
            "context_digest": req.context_digest,
        }));
        Some(rec)
    }

    fn finish_rejection(
        &self,
        inner: &mut Inner,
        request_id: &RequestId,
        status: ApprovalStatus,
        resolver: Option<String>,
        now: DateTime<Utc>,
    ) -> Option<Closed> {
        let req = inner.approvals.get_mut(request_id)?;
        req.status = status;
        req.resolver = resolver;
        req.resolved_at = Some(now);
        let req = req.clone();
        if let Some(rec) = self.resolution_record(inner, &req, now) {
            self.persist_or_queue(inner, rec, None);
        }
        self.close_locked(inner, &req.task_id, Terminal::Failure, now, Some("approval-rejected"))
    }

    pub fn resolve_approval(
        &self,
        request_id: &RequestId,
        verdict: Verdict,
        resolver: &str,
    ) -> Result<Resolution, EngineError> {
        self.expire_approvals();
        let now = self.clock.now();
        let (req, proposed) = {
            let mut inner = self.lock();
            let req = inner.approvals.get(request_id).ok_or_else(|| EngineError::not_found("approval", request_id))?;
            if req.status != ApprovalStatus::Pending {
                return Err(EngineError::Conflict(format!("approval {request_id} is {:?}", req.status)));
            }
            if verdict == Verdict::Rejected {
                let closed = self.finish_rejection(&mut inner, request_id, ApprovalStatus::Rejected, Some(resolver.into()), now);
                let request = inner.approvals[request_id].clone();
                return Ok(Resolution { request, decision: None, closed });
            }
            let req = inner.approvals.get_mut(request_id).expect("looked up above");
            req.status = ApprovalStatus::Approved;
            req.resolver = Some(resolver.to_string());
            req.resolved_at = Some(now);
            let req = req.clone();

            if let Some(rec) = self.resolution_record(&inner, &req, now) {
                if let Err(e) = self.persist(&mut inner, rec, None) {
                    let cause = FailCause::AuditWrite { message: e.to_string() };
                    let closed = self.close_locked(&mut inner, &req.task_id, Terminal::Failure, now, Some(FAIL_CLOSED));
                    let task = &req.task_id;
                    let decision = Decision {
                        task_id: task.clone(),
                        step_index: 0,
                        outcome: Outcome::Block,
                        v_i: 1.0,
                        per_policy: Vec::new(),
                        reason: fail_reason(&cause),
                        fail_closed: Some(cause),
                        approval_request: None,
                        approval_granted: Some(request_id.clone()),
                        sigma_version: self.ledger.version(),
                        audit_sequence_no: None,
                    };
                    return Ok(Resolution { request: req, decision: Some(decision), closed });
                }
            }
            let approval_step = Step {
                step_type: StepType::new(StepKind::Deterministic, HUMAN_APPROVAL),
                input: Payload::new(
                    serde_json::json!({ "request_id": request_id, "resolver": resolver }).to_string(),
                    ContentLabels::default(),
                ),
                output: Some(Payload::default()),
                sub_path_id: None,
            };
            let agent_id = req.agent_id.clone();
            self.complete_step(&mut inner, &req.task_id, &agent_id, approval_step)?;
            if let Some(t) = inner.tasks.get_mut(&req.task_id) {
                t.status = TaskStatus::Evaluating;
            }
            (req.clone(), req.proposed.clone())
        };
        let decision = self.run_evaluation(&req.task_id, proposed, Some(request_id.clone()))?;
        let closed = (decision.outcome == Outcome::Block).then(|| {
            let inner = self.lock();
            inner.completed.iter().rev().find(|c| c.task_id == req.task_id).map(|c| Closed {
                terminal: c.terminal,
                v_t: c.v_t,
                utility: c.utility,
            })
        });
        Ok(Resolution { request: req, decision: Some(decision), closed: closed.flatten() })
    }

    // ---- closing ------------------------------------------------------

    /// Closes `task_id` with its natural terminal state.
    pub fn close_task(&self, task_id: &TaskId, terminal: Terminal) -> Result<Closed, EngineError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let task = inner.tasks.get(task_id).ok_or_else(|| EngineError::not_found("task", task_id))?;
        if !matches!(task.status, TaskStatus::Ready) {
            return Err(EngineError::Conflict(format!("task {task_id} is {}", task.status.name())));
        }
        self.close_locked(&mut inner, task_id, terminal, now, None)
            .ok_or_else(|| EngineError::Conflict(format!("task {task_id} could not be closed")))
    }

    fn close_locked(
        &self,
        inner: &mut Inner,
        task_id: &TaskId,
        terminal: Terminal,
        now: DateTime<Utc>,
        cause: Option<&str>,
    ) -> Option<Closed> {
        let rule = self.config.utility;
        let task = inner.tasks.get_mut(task_id)?;
        if matches!(task.status, TaskStatus::Closed) {
            return None;
        }
        let utility = task.path.close(terminal, rule).ok()?;
        task.status = TaskStatus::Closed;
        let v_t = task.last_v;
        let agent_id = task.path.agent_id.clone();
        let version = task.agent_version;
        let parent = task.parent.clone();
        let vector = task.vector.clone();
        let step_index = task.path.len() as u64;
        inner.completed.push(CompletedTask {
            task_id: task_id.clone(),
            agent_id: agent_id.clone(),
            terminal,
            v_t,
            utility,
            closed_at: now,
            parent: parent.clone(),
        });
        if let Some(agent) = inner.agents.get(&agent_id).and_then(|s| s.versions.get(&version)).cloned() {
            let mut rec = self.draft(RecordKind::TaskClosed, now, agent);
            rec.task_id = Some(task_id.clone());
            rec.step_index = Some(step_index);
            rec.vector_snapshot = Some(vector);
            rec.v_i = v_t;
            rec.event = Some(serde_json::json!({
                "terminal": terminal,
                "v_t": v_t,
                "utility": utility,
                "cause": cause,
                "parent_task_id": parent,
            }));
            self.persist_or_queue(inner, rec, None);
        }
        if let Some(parent) = &parent {
            self.finish_child(inner, task_id, parent);
        }
        self.drain_queue(inner);
        Some(Closed { terminal, v_t, utility })
    }

    // ---- inspection ---------------------------------------------------

    pub fn task(&self, task_id: &TaskId) -> Option<TaskView> {
        let inner = self.lock();
        let t = inner.tasks.get(task_id)?;
        Some(TaskView {
            task_id: task_id.clone(),
            agent_id: t.path.agent_id.clone(),
            agent_version: t.agent_version,
            state: t.status.name().to_string(),
            path: t.path.clone(),
            vector: t.vector.clone(),
            last_v: t.last_v,
            parent: t.parent.clone(),
            pending_approval: match &t.status {
                TaskStatus::Paused { request_id } => Some(request_id.clone()),
                _ => None,
            },
        })
    }

    pub fn completed(&self) -> Vec<CompletedTask> {
        self.lock().completed.clone()
    }

    pub fn completed_task(&self, task_id: &TaskId) -> Option<CompletedTask> {
        self.lock().completed.iter().rev().find(|c| &c.task_id == task_id).cloned()
    }

    pub fn fleet_report(&self) -> FleetReport {
        let now = self.clock.now();
        let inner = self.lock();
        let window = self.config.budget_window_secs.map(|s| TimeDelta::seconds(s as i64));
        let in_window: Vec<&CompletedTask> =
            inner.completed.iter().filter(|c| window.is_none_or(|w| now - c.closed_at <= w)).collect();
        let sum = |vs: Vec<f64>| -> f64 {
            let mut vs = vs;
            vs.sort_by(f64::total_cmp);
            vs.iter().sum()
        };
        let completed_v_sum = sum(in_window.iter().map(|c| c.v_t).collect());
        let successful_v_sum =
            sum(in_window.iter().filter(|c| c.terminal == Terminal::Success).map(|c| c.v_t).collect());
        let utility_sum = sum(in_window.iter().map(|c| c.utility).collect());
        let active: Vec<f64> =
            inner.tasks.values().filter(|t| !matches!(t.status, TaskStatus::Closed)).map(|t| t.last_v).collect();
        let active_tasks = active.len();
        let active_v_sum = sum(active);
        let total_v_sum = completed_v_sum + active_v_sum;
        let b = self.config.budget_b;
        let (utilization, utilization_infinite) = if b > 0.0 {
            (Some(total_v_sum / b), false)
        } else if total_v_sum == 0.0 {
            (Some(0.0), false)
        } else {
            (None, true)
        };
        FleetReport {
            completed_tasks: in_window.len(),
            active_tasks,
            completed_v_sum,
            successful_v_sum,
            active_v_sum,
            total_v_sum,
            utility_sum,
            budget_b: b,
            utilization,
            utilization_infinite,
        }
    }
}
