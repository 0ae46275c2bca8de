//! Request and response bodies of the /v1 API.

use chrono::{DateTime, Utc};
use pathwarden_core::canonical::{rfc3339, Digest};
use pathwarden_core::engine::{ApprovalContext, ApprovalRequest, ApprovalStatus, Closed, Decision, Verdict};
use pathwarden_core::model::{AgentId, ContentLabels, ProposedAction, RequestId, RiskClass, StepType, TaskId, Terminal};
use serde::{Deserialize, Serialize};

pub const API_VERSION: &str = "v1";

/// Every mutating request is wrapped in an envelope carrying its idempotency key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEnvelope<P = serde_json::Value> {
    pub request_id: String,
    pub org_id: String,
    pub payload: P,
    #[serde(default = "default_version")]
    pub api_version: String,
}

fn default_version() -> String {
    API_VERSION.to_string()
}

impl<P> WireEnvelope<P> {
    pub fn new(request_id: impl Into<String>, org_id: impl Into<String>, payload: P) -> Self {
        Self { request_id: request_id.into(), org_id: org_id.into(), payload, api_version: default_version() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmitRequest {
    pub agent_id: AgentId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelegateRequest {
    pub agent_id: AgentId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelegateResponse {
    pub child_task_id: TaskId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseRequest {
    pub terminal: Terminal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolveRequest {
    pub verdict: Verdict,
    pub resolver: String,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefinitionRequest {
    pub definition: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionResponse {
    pub agent_id: AgentId,
    pub running_definition_hash: Digest,
}

/// Decision plus where to poll when the outcome is Steer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposeResponse {
    #[serde(flatten)]
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approval_location: Option<String>,
}

/// Reviewer view of an approval request. The proposed payload bytes are only
/// included for callers holding the content scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalSummary {
    pub request_id: RequestId,
    pub task_id: TaskId,
    pub agent_id: AgentId,
    pub agent_purpose: Option<String>,
    pub risk_class: Option<RiskClass>,
    pub step_type: StepType,
    pub input_labels: ContentLabels,
    pub input_digest: Digest,
    pub steer_v_i: f64,
    pub reason: Vec<String>,
    pub context: ApprovalContext,
    pub context_digest: Digest,
    #[serde(with = "rfc3339")]
    pub created_at: DateTime<Utc>,
    pub status: ApprovalStatus,
    pub resolver: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed: Option<ProposedAction>,
}

impl ApprovalSummary {
    pub fn new(req: &ApprovalRequest, purpose: Option<String>, risk: Option<RiskClass>, content: bool) -> Self {
        Self {
            request_id: req.request_id.clone(),
            task_id: req.task_id.clone(),
            agent_id: req.agent_id.clone(),
            agent_purpose: purpose,
            risk_class: risk,
            step_type: req.proposed.step_type.clone(),
            input_labels: req.proposed.input.labels.clone(),
            input_digest: Digest::of(&req.proposed.input.data),
            steer_v_i: req.steer_v_i,
            reason: req.reason.clone(),
            context: req.context.clone(),
            context_digest: req.context_digest,
            created_at: req.created_at,
            status: req.status,
            resolver: req.resolver.clone(),
            proposed: content.then(|| req.proposed.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalFeed {
    /// Changes whenever the service handled a mutating request.
    pub version: u64,
    pub pending: Vec<ApprovalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolveResponse {
    pub request: ApprovalSummary,
    pub decision: Option<Decision>,
    pub closed: Option<Closed>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResponse {
    pub head: Digest,
    pub chain_valid: bool,
    pub content_included: bool,
    pub records: Vec<serde_json::Value>,
}
