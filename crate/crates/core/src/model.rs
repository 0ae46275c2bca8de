//! Execution paths, steps, proposed actions and agent identity.

use std::collections::BTreeSet;
use std::fmt;

use base64::Engine as _;
use chrono::{DateTime, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::canonical::{canonical_hash_value, CanonicalError, Digest};

/// Subkind of the step that records a personal-data classification check.
pub const PII_CHECK: &str = "PII_Check";
/// Subkind of the step the engine appends when a reviewer approves an action.
pub const HUMAN_APPROVAL: &str = "Human_Approval";
/// Subkinds that are valid without a tool-registry entry.
pub const RESERVED_SUBKINDS: [&str; 2] = [PII_CHECK, HUMAN_APPROVAL];
/// Data category that the PII predecessor policy guards by default.
pub const PERSONAL_DATA: &str = "personal_data";

pub const MAX_SUBKIND_LEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("path closed")]
    PathClosed,
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("invalid agent record: {0}")]
    InvalidAgent(String),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

id_type!(AgentId);
id_type!(TaskId);
id_type!(
    /// Identifier of an approval request raised by a Steer decision.
    RequestId
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StepKind {
    /// A model call.
    Stochastic,
    /// A tool call.
    Deterministic,
    /// A delegation that produces a sub-path.
    Composite,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StepType {
    pub kind: StepKind,
    pub subkind: String,
}

impl StepType {
    pub fn new(kind: StepKind, subkind: impl Into<String>) -> Self {
        Self { kind, subkind: subkind.into() }
    }

    /// Checks the label shape. Registry membership is checked by the engine.
    pub fn validate(&self) -> Result<(), ModelError> {
        validate_subkind(&self.subkind)
    }

    pub fn is_reserved(&self) -> bool {
        RESERVED_SUBKINDS.contains(&self.subkind.as_str())
    }
}

pub fn validate_subkind(subkind: &str) -> Result<(), ModelError> {
    if subkind.is_empty() || subkind.len() > MAX_SUBKIND_LEN {
        return Err(ModelError::InvalidStep(format!("subkind must be 1..={MAX_SUBKIND_LEN} characters")));
    }
    Ok(())
}

/// Content labels attached to a payload: data categories plus a sensitivity level.
///
/// `sensitivity: None` means the caller supplied no level.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentLabels {
    #[serde(default)]
    pub categories: BTreeSet<String>,
    #[serde(default)]
    pub sensitivity: Option<u32>,
}

impl ContentLabels {
    pub fn new<I, S>(categories: I, sensitivity: Option<u32>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { categories: categories.into_iter().map(Into::into).collect(), sensitivity }
    }
}

/// Opaque payload bytes plus externally supplied labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    #[serde(with = "base64_bytes", default)]
    pub data: Vec<u8>,
    #[serde(default)]
    pub labels: ContentLabels,
}

impl Payload {
    pub fn new(data: impl Into<Vec<u8>>, labels: ContentLabels) -> Self {
        Self { data: data.into(), labels }
    }

    pub fn text(s: &str) -> Self {
        Self { data: s.as_bytes().to_vec(), labels: ContentLabels::default() }
    }

    pub fn with_labels(mut self, labels: ContentLabels) -> Self {
        self.labels = labels;
        self
    }
}

mod base64_bytes {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &[u8], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(deserializer)?;
        base64::engine::general_purpose::STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

/// A completed step `(τ, d_in, d_out)`. Labels are the effective labels after
/// the engine merged registry metadata into the caller-supplied ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub step_type: StepType,
    pub input: Payload,
    #[serde(default)]
    pub output: Option<Payload>,
    #[serde(default)]
    pub sub_path_id: Option<TaskId>,
}

impl Step {
    pub fn validate(&self, sigma_ceiling: u32) -> Result<(), ModelError> {
        self.step_type.validate()?;
        let composite = self.step_type.kind == StepKind::Composite;
        if composite != self.sub_path_id.is_some() {
            return Err(ModelError::InvalidStep("sub_path_id must be present exactly for Composite steps".into()));
        }
        for payload in std::iter::once(&self.input).chain(self.output.as_ref()) {
            if let Some(s) = payload.labels.sensitivity {
                if s > sigma_ceiling {
                    return Err(ModelError::InvalidStep(format!("sensitivity {s} exceeds ceiling {sigma_ceiling}")));
                }
            }
        }
        Ok(())
    }

    pub fn is_completed(&self) -> bool {
        self.output.is_some()
    }
}

/// The intended next action `s* = (τ*, d*_in)`; it never carries an output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposedAction {
    pub step_type: StepType,
    #[serde(default)]
    pub input: Payload,
}

impl ProposedAction {
    pub fn new(step_type: StepType, input: Payload) -> Self {
        Self { step_type, input }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Terminal {
    Success,
    Failure,
}

/// Maps a terminal state to a task utility `u(P)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule")]
pub enum UtilityRule {
    /// 1 for Success, 0 for Failure.
    #[default]
    BinarySuccess,
    /// `success_value` for Success, 0 for Failure.
    Scaled { success_value: f64 },
}

impl UtilityRule {
    pub fn utility(&self, terminal: Terminal) -> f64 {
        match (self, terminal) {
            (_, Terminal::Failure) => 0.0,
            (UtilityRule::BinarySuccess, Terminal::Success) => 1.0,
            (UtilityRule::Scaled { success_value }, Terminal::Success) => success_value.max(0.0),
        }
    }
}

/// The ordered steps one agent takes on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPath {
    pub task_id: TaskId,
    pub agent_id: AgentId,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub terminal: Option<Terminal>,
    #[serde(default)]
    pub utility: Option<f64>,
}

impl ExecutionPath {
    pub fn new(task_id: TaskId, agent_id: AgentId) -> Self {
        Self { task_id, agent_id, steps: Vec::new(), terminal: None, utility: None }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_closed(&self) -> bool {
        self.terminal.is_some()
    }

    /// Appends `step`; the step is assumed validated by the caller.
    pub fn append_step(&mut self, step: Step) -> Result<usize, ModelError> {
        if self.is_closed() {
            return Err(ModelError::PathClosed);
        }
        self.steps.push(step);
        Ok(self.steps.len())
    }

    pub fn close(&mut self, terminal: Terminal, rule: UtilityRule) -> Result<f64, ModelError> {
        if self.is_closed() {
            return Err(ModelError::PathClosed);
        }
        let u = rule.utility(terminal);
        self.terminal = Some(terminal);
        self.utility = Some(u);
        Ok(u)
    }
}

/// Functional form of [`ExecutionPath::append_step`].
pub fn append_step(mut path: ExecutionPath, step: Step) -> Result<ExecutionPath, ModelError> {
    path.append_step(step)?;
    Ok(path)
}

/// Functional form of [`ExecutionPath::close`] with the default utility rule.
pub fn close_path(mut path: ExecutionPath, terminal: Terminal) -> Result<ExecutionPath, ModelError> {
    path.close(terminal, UtilityRule::BinarySuccess)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskClass {
    Low,
    High,
}

/// A daily UTC interval `[start, end)` in minutes since midnight.
/// `start > end` wraps midnight; `start == end` covers the whole day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DailyWindow {
    pub start_minute: u16,
    pub end_minute: u16,
}

impl DailyWindow {
    pub fn new(start_minute: u16, end_minute: u16) -> Result<Self, String> {
        if start_minute >= 1440 || end_minute >= 1440 {
            return Err("minute of day must be < 1440".into());
        }
        Ok(Self { start_minute, end_minute })
    }

    pub fn contains_minute(&self, minute: u16) -> bool {
        let (s, e) = (self.start_minute, self.end_minute);
        if s == e {
            true
        } else if s < e {
            s <= minute && minute < e
        } else {
            minute >= s || minute < e
        }
    }

    pub fn contains(&self, ts: &DateTime<Utc>) -> bool {
        self.contains_minute((ts.hour() * 60 + ts.minute()) as u16)
    }
}

impl fmt::Display for DailyWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:02}:{:02}-{:02}:{:02}",
            self.start_minute / 60,
            self.start_minute % 60,
            self.end_minute / 60,
            self.end_minute % 60
        )
    }
}

impl std::str::FromStr for DailyWindow {
    type Err = String;

    /// Parses `HH:MM-HH:MM`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        fn minute(part: &str) -> Result<u16, String> {
            let (h, m) = part.trim().split_once(':').ok_or_else(|| format!("bad time {part:?}"))?;
            let h: u16 = h.parse().map_err(|_| format!("bad hour {h:?}"))?;
            let m: u16 = m.parse().map_err(|_| format!("bad minute {m:?}"))?;
            if h > 23 || m > 59 {
                return Err(format!("time out of range {part:?}"));
            }
            Ok(h * 60 + m)
        }
        let (a, b) = s.split_once('-').ok_or_else(|| format!("expected HH:MM-HH:MM, got {s:?}"))?;
        DailyWindow::new(minute(a)?, minute(b)?)
    }
}

impl Serialize for DailyWindow {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DailyWindow {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Registered agent metadata `M_A`, including the registered hash `h(A)`.
///
/// This is the part of an agent record policies read and the audit trail
/// snapshots; the definition itself lives on [`AgentRecord`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentMetadata {
    pub agent_id: AgentId,
    #[serde(default)]
    pub purpose: String,
    #[serde(default)]
    pub risk_class: Option<RiskClass>,
    #[serde(default)]
    pub owner: String,
    #[serde(default)]
    pub allowed_tools: BTreeSet<String>,
    #[serde(default)]
    pub operating_hours: Option<DailyWindow>,
    pub definition_hash: Digest,
    #[serde(default = "first_version")]
    pub version: u64,
}

fn first_version() -> u64 {
    1
}

/// An agent record as submitted for registration.
///
/// `definition` is the running definition; `definition_hash` is the hash the
/// owner registered. They agree for every accepted record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    #[serde(flatten)]
    pub meta: AgentMetadata,
    pub definition: serde_json::Value,
    #[serde(default)]
    pub retired: bool,
}

impl AgentRecord {
    /// Builds a record whose registered hash is computed from `definition`.
    pub fn new(
        agent_id: impl Into<String>,
        purpose: impl Into<String>,
        risk_class: RiskClass,
        owner: impl Into<String>,
        allowed_tools: impl IntoIterator<Item = impl Into<String>>,
        definition: serde_json::Value,
    ) -> Result<Self, ModelError> {
        let definition_hash = canonical_hash_value(&definition)?;
        Ok(Self {
            meta: AgentMetadata {
                agent_id: AgentId::new(agent_id),
                purpose: purpose.into(),
                risk_class: Some(risk_class),
                owner: owner.into(),
                allowed_tools: allowed_tools.into_iter().map(Into::into).collect(),
                operating_hours: None,
                definition_hash,
                version: 1,
            },
            definition,
            retired: false,
        })
    }

    pub fn agent_id(&self) -> &AgentId {
        &self.meta.agent_id
    }

    /// Hash of the running definition carried by this record.
    pub fn running_hash(&self) -> Result<Digest, ModelError> {
        Ok(canonical_hash_value(&self.definition)?)
    }

    /// Shape checks; policy checks (documentation, integrity) happen at registration.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.meta.agent_id.as_str().trim().is_empty() {
            return Err(ModelError::InvalidAgent("agent_id is empty".into()));
        }
        if self.meta.version == 0 {
            return Err(ModelError::InvalidAgent("version must be >= 1".into()));
        }
        for tool in &self.meta.allowed_tools {
            validate_subkind(tool).map_err(|e| ModelError::InvalidAgent(e.to_string()))?;
        }
        Ok(())
    }
}
