//! Deterministic replay of audited decisions.
//!
//! Each Registration and StepDecision record carries everything its scores
//! were computed from: the agent metadata, running definition hash, state
//! vector, Σ version, proposed action (content tier) and clock. Replay
//! re-evaluates the pinned policy set against those inputs and compares
//! scores, `v_i` and the outcome bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::audit::{AuditRecord, FailCause, RecordKind};
use crate::model::{Payload, ProposedAction};
use crate::policy::{compose_enforced, evaluate, PolicyContext, PolicyScore, PolicySet, PolicySpec};
use crate::engine::{registration_outcome, registration_policies, step_policies};
use crate::registry::ToolRegistry;
use crate::state::SnapshotStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum ReplayVerdict {
    Match,
    Mismatch { detail: String },
    /// Inputs needed for replay are missing, or the record was forced by an
    /// environmental fault (timeout, storage, injected) that replay cannot reproduce.
    Unverifiable { reason: String },
    /// Content tier redacted: listed policies could not be re-evaluated; all
    /// others matched.
    UnverifiableContent { policies: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub sequence_no: u64,
    #[serde(flatten)]
    pub verdict: ReplayVerdict,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayOptions<'a> {
    /// Evaluate every record against this set instead of the version it names.
    pub policy_set_override: Option<&'a PolicySet>,
}

/// Policy sets keyed by version string.
pub type PolicySets = BTreeMap<String, PolicySet>;

pub fn policy_sets<I: IntoIterator<Item = PolicySet>>(sets: I) -> PolicySets {
    sets.into_iter().map(|s| (s.version.clone(), s)).collect()
}

/// Replays every decision record; other record kinds are skipped.
pub fn replay_decisions(
    records: &[AuditRecord],
    sets: &PolicySets,
    snapshots: &SnapshotStore,
    options: ReplayOptions<'_>,
) -> Vec<ReplayEntry> {
    records
        .iter()
        .filter(|r| matches!(r.kind, RecordKind::Registration | RecordKind::StepDecision))
        .map(|r| ReplayEntry { sequence_no: r.sequence_no, verdict: replay_record(r, sets, snapshots, options) })
        .collect()
}

fn unverifiable(reason: impl Into<String>) -> ReplayVerdict {
    ReplayVerdict::Unverifiable { reason: reason.into() }
}

fn mismatch(detail: impl Into<String>) -> ReplayVerdict {
    ReplayVerdict::Mismatch { detail: detail.into() }
}

fn same_score(a: &PolicyScore, b: &PolicyScore) -> bool {
    a.policy_id == b.policy_id && a.version == b.version && a.mode == b.mode && a.value.to_bits() == b.value.to_bits()
}

pub fn replay_record(
    record: &AuditRecord,
    sets: &PolicySets,
    snapshots: &SnapshotStore,
    options: ReplayOptions<'_>,
) -> ReplayVerdict {
    if let Some(cause) = &record.fail_closed {
        if !cause.is_deterministic() {
            return unverifiable(format!("fail-closed on an environmental fault: {cause:?}"));
        }
    }
    let Some(set) = options.policy_set_override.or_else(|| sets.get(&record.policy_set_version)) else {
        return unverifiable(format!("policy set {} not available", record.policy_set_version));
    };
    let Some(sigma_version) = record.sigma_version else {
        return unverifiable("record has no Σ version");
    };
    let Some(ledger) = snapshots.get(sigma_version) else {
        return unverifiable(format!("Σ snapshot {sigma_version} not available"));
    };
    let Some(running) = record.running_definition_hash else {
        return unverifiable("record has no running definition hash");
    };
    let Some(vector) = record.vector_snapshot.as_ref() else {
        return unverifiable("record has no state vector");
    };

    let mut tools = ToolRegistry::default();
    let mut redacted = false;
    let proposed = match record.kind {
        RecordKind::Registration => None,
        _ => {
            let Some(meta) = &record.proposed else {
                return unverifiable("step record has no proposed action");
            };
            if let Some(t) = &meta.tool {
                tools.insert(t.clone());
            }
            let input = match &record.content {
                Some(c) => c.proposed_input.clone(),
                None => {
                    redacted = true;
                    Payload::default()
                }
            };
            Some(ProposedAction::new(meta.step_type.clone(), input))
        }
    };
    let policies: Vec<&PolicySpec> = match record.kind {
        RecordKind::Registration => registration_policies(set),
        _ => step_policies(set, record.integrity_checked),
    };
    let ctx = PolicyContext {
        agent: &record.agent,
        running_definition_hash: running,
        vector,
        proposed: proposed.as_ref(),
        ledger,
        clock: record.timestamp,
        tools: &tools,
    };

    let content_policies: Vec<String> = if redacted {
        policies.iter().filter(|p| p.template.reads_proposed_content()).map(|p| p.policy_id.clone()).collect()
    } else {
        Vec::new()
    };

    let mut scores = Vec::with_capacity(policies.len());
    let mut error = None;
    for p in &policies {
        if content_policies.contains(&p.policy_id) {
            continue;
        }
        match evaluate(p, &ctx) {
            Ok(s) => scores.push(s),
            Err(e) => {
                error = Some(FailCause::EvaluationError { policy_id: p.policy_id.clone(), message: e.to_string() });
                break;
            }
        }
    }

    let recorded: Vec<&PolicyScore> =
        record.per_policy_scores.iter().filter(|s| !content_policies.contains(&s.policy_id)).collect();
    match (&error, &record.fail_closed) {
        (Some(got), Some(want)) if got == want => {}
        (Some(got), _) => return mismatch(format!("replay failed with {got:?}, record has {:?}", record.fail_closed)),
        (None, Some(want)) => return mismatch(format!("record failed with {want:?}, replay succeeded")),
        (None, None) => {}
    }
    if scores.len() != recorded.len() {
        return mismatch(format!("{} scores replayed, {} recorded", scores.len(), recorded.len()));
    }
    if let Some((got, want)) = scores.iter().zip(&recorded).find(|(a, b)| !same_score(a, b)) {
        return mismatch(format!("policy {}: replayed {} vs recorded {}", want.policy_id, got.value, want.value));
    }
    if error.is_some() {
        // Fail-closed on a reproducible evaluation error: the forced Block is the decision.
        return ReplayVerdict::Match;
    }
    if !content_policies.is_empty() {
        return ReplayVerdict::UnverifiableContent { policies: content_policies };
    }

    let v = match compose_enforced(&scores) {
        Ok(v) => v,
        Err(e) => return mismatch(format!("composition failed: {e}")),
    };
    if v.to_bits() != record.v_i.to_bits() {
        return mismatch(format!("v_i replayed {v} vs recorded {}", record.v_i));
    }
    let outcome = match record.kind {
        RecordKind::Registration => registration_outcome(&scores, &record.thresholds),
        _ => record.thresholds.decide(v, record.approval_granted.is_some()),
    };
    if Some(outcome) != record.outcome {
        return mismatch(format!("outcome replayed {outcome:?} vs recorded {:?}", record.outcome));
    }
    ReplayVerdict::Match
}

/// True if every entry is a [`ReplayVerdict::Match`].
pub fn all_match(entries: &[ReplayEntry]) -> bool {
    entries.iter().all(|e| e.verdict == ReplayVerdict::Match)
}
