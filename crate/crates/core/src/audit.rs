//! Append-only, hash-chained audit trail with a two-tier record layout.
//!
//! Each record has a metadata tier (scores, decision, snapshots, digests) and
//! an optional content tier (raw proposed payload). `record_hash` commits to
//! the metadata tier plus `content_digest`, never to the raw content, so the
//! content tier can be redacted without breaking the chain.
//!
//! ## Storage format
//!
//! `trail.jsonl` holds one canonical-JSON record per line; `sigma/<version>.json`
//! holds the ledger snapshots records refer to.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{canonical_json, digest_of, rfc3339, CanonicalError, Digest, DIGEST_ALGORITHM};
use crate::decision::{Outcome, Thresholds};
use crate::model::{AgentMetadata, Payload, RequestId, StepType, TaskId};
use crate::policy::PolicyScore;
use crate::registry::ToolDescriptor;
use crate::state::{LedgerSnapshot, SharedLedger, SnapshotStore, TaskStateVector};

pub const TRAIL_FILE: &str = "trail.jsonl";
pub const SIGMA_DIR: &str = "sigma";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
    #[error("chain violation: {0}")]
    Chain(String),
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecordKind {
    Registration,
    StepDecision,
    ApprovalResolution,
    TaskClosed,
}

/// Why a decision was forced to Block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cause")]
pub enum FailCause {
    /// A policy could not be evaluated (unknown subkind, bad parameters, ...).
    EvaluationError { policy_id: String, message: String },
    /// An injected evaluator fault.
    InjectedFault { policy_id: String },
    /// The evaluation round exceeded the configured timeout.
    Timeout { elapsed_ms: u64 },
    /// A previous attempt to persist the decision failed.
    AuditWrite { message: String },
    /// The host gave up waiting for the engine. Only a network front end reports this.
    Unavailable { message: String },
}

impl FailCause {
    /// Causes that replay can reproduce from the record alone.
    pub fn is_deterministic(&self) -> bool {
        matches!(self, FailCause::EvaluationError { .. })
    }
}

/// Metadata-tier description of the proposed action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposedMeta {
    pub step_type: StepType,
    /// Registry entry the action resolved to at evaluation time.
    pub tool: Option<ToolDescriptor>,
}

/// Content tier: the raw proposed input including caller-supplied labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentTier {
    pub proposed_input: Payload,
}

impl ContentTier {
    pub fn digest(&self) -> Result<Digest, CanonicalError> {
        digest_of(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub sequence_no: u64,
    #[serde(with = "rfc3339")]
    pub timestamp: DateTime<Utc>,
    pub kind: RecordKind,
    pub digest_algorithm: String,
    pub agent: AgentMetadata,
    pub running_definition_hash: Option<Digest>,
    pub task_id: Option<TaskId>,
    pub step_index: Option<u64>,
    pub vector_snapshot: Option<TaskStateVector>,
    pub sigma_version: Option<u64>,
    pub proposed: Option<ProposedMeta>,
    pub content_digest: Option<Digest>,
    pub per_policy_scores: Vec<PolicyScore>,
    pub v_i: f64,
    pub outcome: Option<Outcome>,
    pub reason: Vec<String>,
    pub policy_set_version: String,
    pub thresholds: Thresholds,
    /// Approval request this evaluation resumes, if any.
    pub approval_granted: Option<RequestId>,
    /// Whether the agent-integrity recheck ran in this round.
    pub integrity_checked: bool,
    pub fail_closed: Option<FailCause>,
    /// Kind-specific details (approval verdicts, terminal state, v_T, ...).
    pub event: Option<serde_json::Value>,
    pub prev_hash: Digest,
    pub record_hash: Digest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<ContentTier>,
}

impl AuditRecord {
    /// A blank record of `kind`; chain fields are filled in by [`AuditTrail::append`].
    pub fn draft(
        kind: RecordKind,
        timestamp: DateTime<Utc>,
        agent: AgentMetadata,
        policy_set_version: &str,
        thresholds: Thresholds,
    ) -> Self {
        Self {
            sequence_no: 0,
            timestamp,
            kind,
            digest_algorithm: DIGEST_ALGORITHM.to_string(),
            agent,
            running_definition_hash: None,
            task_id: None,
            step_index: None,
            vector_snapshot: None,
            sigma_version: None,
            proposed: None,
            content_digest: None,
            per_policy_scores: Vec::new(),
            v_i: 0.0,
            outcome: None,
            reason: Vec::new(),
            policy_set_version: policy_set_version.to_string(),
            thresholds,
            approval_granted: None,
            integrity_checked: false,
            fail_closed: None,
            event: None,
            prev_hash: Digest::ZERO,
            record_hash: Digest::ZERO,
            content: None,
        }
    }

    /// Digest over the canonical record without `record_hash` and `content`.
    pub fn compute_hash(&self) -> Result<Digest, CanonicalError> {
        let mut v = serde_json::to_value(self).map_err(|e| CanonicalError::Serialization(e.to_string()))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("record_hash");
            obj.remove("content");
        }
        digest_of(&v)
    }

    pub fn to_line(&self) -> Result<String, CanonicalError> {
        canonical_json(self)
    }

    /// Copy without the content tier.
    pub fn metadata_only(&self) -> Self {
        Self { content: None, ..self.clone() }
    }

    fn check_integrity(&self, expected_prev: Digest) -> bool {
        if self.prev_hash != expected_prev {
            return false;
        }
        if self.compute_hash().ok() != Some(self.record_hash) {
            return false;
        }
        match (&self.content, self.content_digest) {
            (Some(c), Some(d)) => c.digest().ok() == Some(d),
            (Some(_), None) => false,
            (None, _) => true,
        }
    }
}

/// Result of [`verify_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainStatus {
    Ok,
    /// Sequence number (position-based) of the first record that fails.
    Corrupt(u64),
}

/// Recomputes every record hash and link. Suffix truncation is not detectable.
pub fn verify_chain(records: &[AuditRecord]) -> ChainStatus {
    let mut prev = Digest::ZERO;
    for (i, r) in records.iter().enumerate() {
        let expected_seq = i as u64 + 1;
        if r.sequence_no != expected_seq || !r.check_integrity(prev) {
            return ChainStatus::Corrupt(expected_seq);
        }
        prev = r.record_hash;
    }
    ChainStatus::Ok
}

/// Verifies a serialized trail. A line that fails to parse, or does not
/// re-serialize to exactly the same bytes, counts as corrupt at its position.
pub fn verify_lines(text: &str) -> ChainStatus {
    let mut prev = Digest::ZERO;
    for (i, line) in text.lines().enumerate() {
        let expected_seq = i as u64 + 1;
        let Ok(r) = serde_json::from_str::<AuditRecord>(line) else {
            return ChainStatus::Corrupt(expected_seq);
        };
        let canonical = r.to_line().ok();
        if canonical.as_deref() != Some(line) || r.sequence_no != expected_seq || !r.check_integrity(prev) {
            return ChainStatus::Corrupt(expected_seq);
        }
        prev = r.record_hash;
    }
    ChainStatus::Ok
}

/// Where a trail is persisted.
pub trait TrailSink: Send {
    fn append_line(&mut self, line: &str) -> io::Result<()>;
    fn put_snapshot(&mut self, version: u64, json: &str) -> io::Result<()>;
    /// Replaces the whole trail (used by redaction).
    fn rewrite(&mut self, lines: &[String]) -> io::Result<()>;
}

/// Keeps everything in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub lines: Vec<String>,
    pub snapshots: Vec<(u64, String)>,
}

impl TrailSink for MemorySink {
    fn append_line(&mut self, line: &str) -> io::Result<()> {
        self.lines.push(line.to_string());
        Ok(())
    }

    fn put_snapshot(&mut self, version: u64, json: &str) -> io::Result<()> {
        self.snapshots.push((version, json.to_string()));
        Ok(())
    }

    fn rewrite(&mut self, lines: &[String]) -> io::Result<()> {
        self.lines = lines.to_vec();
        Ok(())
    }
}

/// JSON-lines file plus a sidecar snapshot directory. Every append is flushed
/// and synced before it returns.
#[derive(Debug)]
pub struct FileSink {
    dir: PathBuf,
    file: File,
}

impl FileSink {
    pub fn create(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(SIGMA_DIR))?;
        let file = OpenOptions::new().create(true).append(true).open(dir.join(TRAIL_FILE))?;
        Ok(Self { dir, file })
    }
}

impl TrailSink for FileSink {
    fn append_line(&mut self, line: &str) -> io::Result<()> {
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.sync_data()
    }

    fn put_snapshot(&mut self, version: u64, json: &str) -> io::Result<()> {
        let path = self.dir.join(SIGMA_DIR).join(format!("{version}.json"));
        fs::write(path, json)
    }

    fn rewrite(&mut self, lines: &[String]) -> io::Result<()> {
        let tmp = self.dir.join(format!("{TRAIL_FILE}.tmp"));
        let mut out = File::create(&tmp)?;
        for l in lines {
            out.write_all(l.as_bytes())?;
            out.write_all(b"\n")?;
        }
        out.sync_all()?;
        fs::rename(&tmp, self.dir.join(TRAIL_FILE))?;
        self.file = OpenOptions::new().append(true).open(self.dir.join(TRAIL_FILE))?;
        Ok(())
    }
}

/// Switchable failure for fault injection. Clones share the switch.
#[derive(Debug, Clone, Default)]
pub struct FaultSwitch {
    fail: Arc<AtomicBool>,
    failures: Arc<AtomicUsize>,
}

impl FaultSwitch {
    pub fn set(&self, fail: bool) {
        self.fail.store(fail, Ordering::SeqCst);
    }

    pub fn is_set(&self) -> bool {
        self.fail.load(Ordering::SeqCst)
    }

    pub fn failures(&self) -> usize {
        self.failures.load(Ordering::SeqCst)
    }
}

/// Wraps a sink and fails every write while its switch is set.
#[derive(Debug)]
pub struct FaultySink<S> {
    inner: S,
    switch: FaultSwitch,
}

impl<S: TrailSink> FaultySink<S> {
    pub fn new(inner: S, switch: FaultSwitch) -> Self {
        Self { inner, switch }
    }

    fn check(&self) -> io::Result<()> {
        if self.switch.is_set() {
            self.switch.failures.fetch_add(1, Ordering::SeqCst);
            return Err(io::Error::other("injected storage failure"));
        }
        Ok(())
    }
}

impl<S: TrailSink> TrailSink for FaultySink<S> {
    fn append_line(&mut self, line: &str) -> io::Result<()> {
        self.check()?;
        self.inner.append_line(line)
    }

    fn put_snapshot(&mut self, version: u64, json: &str) -> io::Result<()> {
        self.check()?;
        self.inner.put_snapshot(version, json)
    }

    fn rewrite(&mut self, lines: &[String]) -> io::Result<()> {
        self.check()?;
        self.inner.rewrite(lines)
    }
}

/// The trail: in-memory records mirrored to a sink, plus the Σ snapshots
/// that records reference.
pub struct AuditTrail {
    records: Vec<AuditRecord>,
    snapshots: SnapshotStore,
    sink: Box<dyn TrailSink>,
}

impl std::fmt::Debug for AuditTrail {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditTrail").field("records", &self.records.len()).finish()
    }
}

impl Default for AuditTrail {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl AuditTrail {
    pub fn new(sink: Box<dyn TrailSink>) -> Self {
        Self { records: Vec::new(), snapshots: SnapshotStore::default(), sink }
    }

    pub fn in_memory() -> Self {
        Self::new(Box::new(MemorySink::default()))
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn snapshots(&self) -> &SnapshotStore {
        &self.snapshots
    }

    pub fn head(&self) -> Digest {
        self.records.last().map(|r| r.record_hash).unwrap_or(Digest::ZERO)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Persists a Σ snapshot the first time a record refers to its version.
    pub fn ensure_snapshot(&mut self, snap: &LedgerSnapshot) -> Result<(), AuditError> {
        if self.snapshots.get(snap.version).is_some() {
            return Ok(());
        }
        let json = canonical_json(&snap.export())?;
        self.sink.put_snapshot(snap.version, &json)?;
        self.snapshots.insert(snap.clone());
        Ok(())
    }

    /// Seals `record` (sequence number, content digest, chain links, hash)
    /// and persists it. Nothing is kept in memory if the sink fails.
    pub fn append(&mut self, mut record: AuditRecord) -> Result<AuditRecord, AuditError> {
        record.sequence_no = self.records.len() as u64 + 1;
        record.prev_hash = self.head();
        record.digest_algorithm = DIGEST_ALGORITHM.to_string();
        if let Some(c) = &record.content {
            record.content_digest = Some(c.digest()?);
        }
        record.record_hash = record.compute_hash()?;
        self.push_sealed(record)
    }

    /// Appends an externally sealed record after checking it extends the chain.
    pub fn append_sealed(&mut self, record: AuditRecord) -> Result<AuditRecord, AuditError> {
        let expected_seq = self.records.len() as u64 + 1;
        if record.sequence_no != expected_seq {
            return Err(AuditError::Chain(format!("expected sequence {expected_seq}, got {}", record.sequence_no)));
        }
        if !record.check_integrity(self.head()) {
            return Err(AuditError::Chain(format!("record {} does not extend the chain head", record.sequence_no)));
        }
        self.push_sealed(record)
    }

    fn push_sealed(&mut self, record: AuditRecord) -> Result<AuditRecord, AuditError> {
        let line = record.to_line()?;
        self.sink.append_line(&line)?;
        self.records.push(record.clone());
        Ok(record)
    }

    pub fn verify(&self) -> ChainStatus {
        verify_chain(&self.records)
    }

    /// Records of one task.
    pub fn for_task<'a>(&'a self, task: &'a TaskId) -> impl Iterator<Item = &'a AuditRecord> + 'a {
        self.records.iter().filter(move |r| r.task_id.as_ref() == Some(task))
    }

    /// Drops the content tier of every record of `task`. Unknown tasks are a no-op.
    pub fn redact_content_tier(&mut self, task: &TaskId) -> Result<usize, AuditError> {
        let mut next = self.records.clone();
        let mut n = 0;
        for r in next.iter_mut().filter(|r| r.task_id.as_ref() == Some(task) && r.content.is_some()) {
            r.content = None;
            n += 1;
        }
        if n == 0 {
            return Ok(0);
        }
        let lines = next.iter().map(AuditRecord::to_line).collect::<Result<Vec<_>, _>>()?;
        self.sink.rewrite(&lines)?;
        self.records = next;
        Ok(n)
    }

    /// Metadata-tier-only copy of the whole trail as JSON lines.
    pub fn export_metadata(&self) -> Result<String, AuditError> {
        export_metadata(&self.records)
    }
}

pub fn export_metadata(records: &[AuditRecord]) -> Result<String, AuditError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.metadata_only().to_line()?);
        out.push('\n');
    }
    Ok(out)
}

/// Functional form of [`AuditTrail::redact_content_tier`] over plain records.
pub fn redact_content_tier(records: &[AuditRecord], task: &TaskId) -> Vec<AuditRecord> {
    records
        .iter()
        .map(|r| if r.task_id.as_ref() == Some(task) { r.metadata_only() } else { r.clone() })
        .collect()
}

/// Parses JSON-lines records, stopping at the first malformed line.
pub fn parse_lines(text: &str) -> Result<Vec<AuditRecord>, AuditError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AuditError::Malformed { line: i + 1, reason: e.to_string() })
        })
        .collect()
}

/// A trail directory as stored on disk.
#[derive(Debug)]
pub struct StoredTrail {
    pub raw: String,
    pub snapshots: SnapshotStore,
}

impl StoredTrail {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, AuditError> {
        let dir = dir.as_ref();
        let raw = fs::read_to_string(dir.join(TRAIL_FILE))?;
        let mut snapshots = SnapshotStore::default();
        let sigma = dir.join(SIGMA_DIR);
        if sigma.is_dir() {
            for entry in fs::read_dir(&sigma)? {
                let entry = entry?;
                let file = BufReader::new(File::open(entry.path())?);
                let mut text = String::new();
                for line in file.lines() {
                    text.push_str(&line?);
                }
                let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| AuditError::Malformed {
                    line: 0,
                    reason: format!("{}: {e}", entry.path().display()),
                })?;
                let ledger: SharedLedger = serde_json::from_value(v["ledger"].clone()).map_err(|e| {
                    AuditError::Malformed { line: 0, reason: format!("{}: {e}", entry.path().display()) }
                })?;
                snapshots.insert(Arc::new(ledger));
            }
        }
        Ok(Self { raw, snapshots })
    }

    pub fn records(&self) -> Result<Vec<AuditRecord>, AuditError> {
        parse_lines(&self.raw)
    }
}
