//! Deterministic policy functions, template parameterization and score composition.
//!
//! Every evaluator is a pure function of a [`PolicyContext`]. Binary templates
//! return exactly `0.0` or `1.0`; graduated ones return a value in `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::Digest;
use crate::model::{AgentMetadata, DailyWindow, ProposedAction, RiskClass, PERSONAL_DATA};
use crate::registry::{effective_input_labels, RegistryError, ToolDescriptor, ToolRegistry};
use crate::state::{SharedLedger, TaskStateVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("configuration error in policy {policy_id}: {reason}")]
    Config { policy_id: String, reason: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("policy {0} needs a proposed action")]
    MissingProposed(String),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("policy set: {0}")]
    PolicySet(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum PolicyMode {
    #[default]
    Enforced,
    /// Scored and logged, excluded from composition.
    FlagOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Reads only the agent record and the clock; evaluated at registration.
    PreTask,
    PerStep,
}

fn personal_data() -> String {
    PERSONAL_DATA.to_string()
}

fn high_only() -> BTreeSet<RiskClass> {
    BTreeSet::from([RiskClass::High])
}

/// A policy template together with its parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "template", content = "parameters")]
pub enum PolicyTemplate {
    AgentIntegrity,
    Documentation,
    PiiPredecessor {
        #[serde(default = "personal_data")]
        category: String,
    },
    ApprovalRequired {
        #[serde(default = "high_only")]
        risk_classes: BTreeSet<RiskClass>,
    },
    DataExfiltration {
        sigma_ceiling: u32,
    },
    InformationBarrier {
        /// Restricts the policy to one barrier; all declared barriers otherwise.
        #[serde(default)]
        barrier: Option<String>,
    },
    ExecutionBounds {
        max_steps: u64,
    },
    TimeRestriction {
        /// Permitted daily window per risk class. An agent-level
        /// `operating_hours` overrides its class window.
        #[serde(default)]
        windows: BTreeMap<RiskClass, DailyWindow>,
    },
    AccessControl,
}

impl PolicyTemplate {
    pub fn phase(&self) -> Phase {
        match self {
            PolicyTemplate::AgentIntegrity | PolicyTemplate::Documentation | PolicyTemplate::TimeRestriction { .. } => {
                Phase::PreTask
            }
            _ => Phase::PerStep,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicyTemplate::AgentIntegrity => "AgentIntegrity",
            PolicyTemplate::Documentation => "Documentation",
            PolicyTemplate::PiiPredecessor { .. } => "PiiPredecessor",
            PolicyTemplate::ApprovalRequired { .. } => "ApprovalRequired",
            PolicyTemplate::DataExfiltration { .. } => "DataExfiltration",
            PolicyTemplate::InformationBarrier { .. } => "InformationBarrier",
            PolicyTemplate::ExecutionBounds { .. } => "ExecutionBounds",
            PolicyTemplate::TimeRestriction { .. } => "TimeRestriction",
            PolicyTemplate::AccessControl => "AccessControl",
        }
    }

    /// Whether the template reads the proposed input's content labels (as
    /// opposed to only its type). Such scores cannot be re-derived once the
    /// content tier of an audit record is redacted.
    pub fn reads_proposed_content(&self) -> bool {
        matches!(self, PolicyTemplate::PiiPredecessor { .. } | PolicyTemplate::InformationBarrier { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub policy_id: String,
    #[serde(flatten)]
    pub template: PolicyTemplate,
    #[serde(default = "one")]
    pub version: u64,
    #[serde(default)]
    pub mode: PolicyMode,
    /// Optional in files; must agree with the template's phase when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

fn one() -> u64 {
    1
}

impl PolicySpec {
    pub fn new(policy_id: impl Into<String>, template: PolicyTemplate) -> Self {
        let phase = Some(template.phase());
        Self { policy_id: policy_id.into(), template, version: 1, mode: PolicyMode::Enforced, phase }
    }

    pub fn flag_only(mut self) -> Self {
        self.mode = PolicyMode::FlagOnly;
        self
    }

    pub fn phase(&self) -> Phase {
        self.template.phase()
    }

    fn config_err(&self, reason: impl Into<String>) -> PolicyError {
        PolicyError::Config { policy_id: self.policy_id.clone(), reason: reason.into() }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.policy_id.trim().is_empty() {
            return Err(self.config_err("empty policy_id"));
        }
        if let Some(p) = self.phase {
            if p != self.template.phase() {
                return Err(self.config_err(format!("{} is a {:?} template", self.template.name(), self.template.phase())));
            }
        }
        match &self.template {
            PolicyTemplate::DataExfiltration { sigma_ceiling: 0 } => Err(self.config_err("sigma_ceiling must be > 0")),
            PolicyTemplate::ExecutionBounds { max_steps: 0 } => Err(self.config_err("max_steps must be >= 1")),
            PolicyTemplate::PiiPredecessor { category } if category.is_empty() => {
                Err(self.config_err("category must be non-empty"))
            }
            _ => Ok(()),
        }
    }
}

/// An ordered policy set with a set-level version string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySet {
    pub version: String,
    #[serde(default)]
    pub policies: Vec<PolicySpec>,
}

impl PolicySet {
    pub fn new(version: impl Into<String>, policies: Vec<PolicySpec>) -> Self {
        Self { version: version.into(), policies }
    }

    pub fn empty(version: impl Into<String>) -> Self {
        Self::new(version, Vec::new())
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.version.is_empty() {
            return Err(PolicyError::PolicySet("empty version".into()));
        }
        let mut ids = BTreeSet::new();
        for p in &self.policies {
            p.validate()?;
            if !ids.insert(&p.policy_id) {
                return Err(PolicyError::PolicySet(format!("duplicate policy id {}", p.policy_id)));
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self, PolicyError> {
        let set: PolicySet = serde_json::from_str(json).map_err(|e| PolicyError::PolicySet(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::PolicySet(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn in_phase(&self, phase: Phase) -> impl Iterator<Item = &PolicySpec> {
        self.policies.iter().filter(move |p| p.phase() == phase)
    }

    /// A copy without the policies for which `drop` returns true.
    pub fn without(&self, version: impl Into<String>, drop: impl Fn(&PolicySpec) -> bool) -> Self {
        Self::new(version, self.policies.iter().filter(|p| !drop(p)).cloned().collect())
    }
}

/// Everything a policy may read: `A`, `P_i` (through the state vector), `s*`,
/// `Σ` and the clock.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub agent: &'a AgentMetadata,
    /// Hash of the definition the agent is currently running.
    pub running_definition_hash: Digest,
    pub vector: &'a TaskStateVector,
    /// Absent during registration.
    pub proposed: Option<&'a ProposedAction>,
    pub ledger: &'a SharedLedger,
    pub clock: DateTime<Utc>,
    pub tools: &'a ToolRegistry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub policy_id: String,
    pub version: u64,
    pub value: f64,
    #[serde(default)]
    pub mode: PolicyMode,
}

fn binary(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl<'a> PolicyContext<'a> {
    fn proposed_for(&self, policy: &PolicySpec) -> Result<&'a ProposedAction, PolicyError> {
        self.proposed.ok_or_else(|| PolicyError::MissingProposed(policy.policy_id.clone()))
    }

    fn proposed_tool(&self, policy: &PolicySpec) -> Result<ToolDescriptor, PolicyError> {
        Ok(self.tools.resolve(&self.proposed_for(policy)?.step_type.subkind)?)
    }

    fn proposed_categories(&self, policy: &PolicySpec) -> Result<BTreeSet<String>, PolicyError> {
        let tool = self.proposed_tool(policy)?;
        Ok(effective_input_labels(&tool, &self.proposed_for(policy)?.input).categories)
    }
}

/// `π_j(A, P_i, s*, Σ)`.
pub fn evaluate(policy: &PolicySpec, ctx: &PolicyContext<'_>) -> Result<PolicyScore, PolicyError> {
    policy.validate()?;
    let value = match &policy.template {
        PolicyTemplate::AgentIntegrity => eval_agent_integrity(ctx),
        PolicyTemplate::Documentation => eval_documentation(ctx),
        PolicyTemplate::PiiPredecessor { category } => eval_pii_predecessor(policy, category, ctx)?,
        PolicyTemplate::ApprovalRequired { risk_classes } => eval_approval_required(policy, risk_classes, ctx)?,
        PolicyTemplate::DataExfiltration { sigma_ceiling } => eval_data_exfiltration(policy, *sigma_ceiling, ctx)?,
        PolicyTemplate::InformationBarrier { barrier } => eval_information_barrier(policy, barrier.as_deref(), ctx)?,
        PolicyTemplate::ExecutionBounds { max_steps } => eval_execution_bounds(policy, *max_steps, ctx)?,
        PolicyTemplate::TimeRestriction { windows } => eval_time_restriction(windows, ctx),
        PolicyTemplate::AccessControl => eval_access_control(policy, ctx)?,
    };
    debug_assert!((0.0..=1.0).contains(&value));
    Ok(PolicyScore { policy_id: policy.policy_id.clone(), version: policy.version, value, mode: policy.mode })
}

/// 1 iff the running definition's hash differs from the registered `h(A)`.
pub fn eval_agent_integrity(ctx: &PolicyContext<'_>) -> f64 {
    binary(ctx.running_definition_hash != ctx.agent.definition_hash)
}

/// 1 iff purpose, risk class or owner is absent (empty after trimming).
pub fn eval_documentation(ctx: &PolicyContext<'_>) -> f64 {
    let a = ctx.agent;
    binary(a.purpose.trim().is_empty() || a.risk_class.is_none() || a.owner.trim().is_empty())
}

pub fn eval_pii_predecessor(policy: &PolicySpec, category: &str, ctx: &PolicyContext<'_>) -> Result<f64, PolicyError> {
    let touches = ctx.proposed_categories(policy)?.contains(category);
    Ok(binary(touches && !ctx.vector.pii_check_done))
}

pub fn eval_approval_required(
    policy: &PolicySpec,
    risk_classes: &BTreeSet<RiskClass>,
    ctx: &PolicyContext<'_>,
) -> Result<f64, PolicyError> {
    let tool = ctx.proposed_tool(policy)?;
    let gated = ctx.agent.risk_class.is_some_and(|r| risk_classes.contains(&r));
    Ok(binary(gated && tool.external && !ctx.vector.approval_done))
}

/// `σ_max / σ_ceiling` for external actions, 0 otherwise.
pub fn eval_data_exfiltration(policy: &PolicySpec, sigma_ceiling: u32, ctx: &PolicyContext<'_>) -> Result<f64, PolicyError> {
    if sigma_ceiling == 0 {
        return Err(policy.config_err("sigma_ceiling must be > 0"));
    }
    let tool = ctx.proposed_tool(policy)?;
    if !tool.external {
        return Ok(0.0);
    }
    Ok((f64::from(ctx.vector.sigma_max) / f64::from(sigma_ceiling)).min(1.0))
}

/// 1 iff Σ records the agent on one side of a barrier and the proposed action
/// involves the other side.
pub fn eval_information_barrier(
    policy: &PolicySpec,
    only: Option<&str>,
    ctx: &PolicyContext<'_>,
) -> Result<f64, PolicyError> {
    let barriers = &ctx.ledger.active_barriers;
    if let Some(name) = only {
        if barriers.get(name).is_none() {
            return Err(policy.config_err(format!("barrier {name:?} is not declared")));
        }
    }
    let categories = ctx.proposed_categories(policy)?;
    let recorded = ctx.ledger.barrier_sides_of(&ctx.agent.agent_id);
    let mut fired = false;
    for tag in &categories {
        let Some(side) = barriers.classify(tag)? else { continue };
        if only.is_some_and(|b| b != side.barrier) {
            continue;
        }
        let decl = barriers.get(side.barrier).expect("classified tags name declared barriers");
        let other = decl.other_side(side.side).expect("classified side belongs to its barrier");
        let other_tag = format!("{}:{}", side.barrier, other);
        if recorded.is_some_and(|r| r.contains(&other_tag)) {
            fired = true;
        }
    }
    Ok(binary(fired))
}

/// `min(1, |P_i| / max_steps)`.
pub fn eval_execution_bounds(policy: &PolicySpec, max_steps: u64, ctx: &PolicyContext<'_>) -> Result<f64, PolicyError> {
    if max_steps < 1 {
        return Err(policy.config_err("max_steps must be >= 1"));
    }
    Ok((ctx.vector.step_count as f64 / max_steps as f64).min(1.0))
}

/// 1 iff the clock is outside the permitted window. No window means unrestricted.
pub fn eval_time_restriction(windows: &BTreeMap<RiskClass, DailyWindow>, ctx: &PolicyContext<'_>) -> f64 {
    let window = ctx.agent.operating_hours.or_else(|| ctx.agent.risk_class.and_then(|r| windows.get(&r).copied()));
    match window {
        Some(w) => binary(!w.contains(&ctx.clock)),
        None => 0.0,
    }
}

/// The degenerate case: reads only `A` and `τ*`.
pub fn eval_access_control(policy: &PolicySpec, ctx: &PolicyContext<'_>) -> Result<f64, PolicyError> {
    let subkind = &ctx.proposed_for(policy)?.step_type.subkind;
    Ok(binary(!ctx.agent.allowed_tools.contains(subkind)))
}

/// `v = 1 − Π (1 − π_j)`.
///
/// Factors are multiplied in sorted order so the result does not depend on
/// input order, and the result is clamped from below by the largest input so
/// rounding never pulls it under `max(π_j)`.
pub fn compose_scores(values: &[f64]) -> Result<f64, PolicyError> {
    if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(PolicyError::ScoreOutOfRange(bad));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let complement: f64 = sorted.iter().map(|v| 1.0 - v).product();
    let max = sorted.last().copied().unwrap_or(0.0);
    Ok((1.0 - complement).max(max).clamp(0.0, 1.0))
}

/// Composition over the Enforced scores only.
pub fn compose_enforced(scores: &[PolicyScore]) -> Result<f64, PolicyError> {
    let enforced: Vec<f64> = scores.iter().filter(|s| s.mode == PolicyMode::Enforced).map(|s| s.value).collect();
    compose_scores(&enforced)
}

/// Evaluates every policy of `phase` in set order. The first error aborts the round.
pub fn evaluate_phase(
    set: &PolicySet,
    phase: Phase,
    ctx: &PolicyContext<'_>,
) -> Result<Vec<PolicyScore>, (String, PolicyError)> {
    set.in_phase(phase).map(|p| evaluate(p, ctx).map_err(|e| (p.policy_id.clone(), e))).collect()
}

/// Enforced policy ids with a nonzero score.
pub fn triggering(scores: &[PolicyScore]) -> Vec<String> {
    scores
        .iter()
        .filter(|s| s.mode == PolicyMode::Enforced && s.value > 0.0)
        .map(|s| s.policy_id.clone())
        .collect()
}

/// The standard policy set used by the examples and simulator: one policy per template.
pub fn standard_policy_set(version: &str, sigma_ceiling: u32, max_steps: u64) -> PolicySet {
    PolicySet::new(
        version,
        vec![
            PolicySpec::new("agent-integrity", PolicyTemplate::AgentIntegrity),
            PolicySpec::new("documentation", PolicyTemplate::Documentation),
            PolicySpec::new("time-restriction", PolicyTemplate::TimeRestriction { windows: BTreeMap::new() }),
            PolicySpec::new("access-control", PolicyTemplate::AccessControl),
            PolicySpec::new("pii-predecessor", PolicyTemplate::PiiPredecessor { category: personal_data() }),
            PolicySpec::new("approval-required", PolicyTemplate::ApprovalRequired { risk_classes: high_only() }),
            PolicySpec::new("data-exfiltration", PolicyTemplate::DataExfiltration { sigma_ceiling }),
            PolicySpec::new("information-barrier", PolicyTemplate::InformationBarrier { barrier: None }),
            PolicySpec::new("execution-bounds", PolicyTemplate::ExecutionBounds { max_steps }),
        ],
    )
}
