mod common;

use chrono::TimeDelta;
use common::*;
use pathwarden_core::audit::{ChainStatus, FailCause, RecordKind};
use pathwarden_core::decision::Outcome;
use pathwarden_core::engine::{Admission, ApprovalStatus, EngineConfig, EngineError, FaultPlan, TicketStatus, Verdict};
use pathwarden_core::model::{AgentId, Payload, RiskClass, Terminal};
use pathwarden_core::policy::{standard_policy_set, PolicySet};
use pathwarden_core::replay::{all_match, policy_sets, replay_decisions, ReplayOptions, ReplayVerdict};

fn admitted(a: Admission) -> pathwarden_core::model::TaskId {
    match a {
        Admission::Admitted { task_id } => task_id,
        other => panic!("expected admission, got {other:?}"),
    }
}

fn step(e: &pathwarden_core::engine::Engine, task: &pathwarden_core::model::TaskId, subkind: &str, sigma: u32) {
    let d = e.evaluate_step(task, action(subkind)).unwrap();
    assert_eq!(d.outcome, Outcome::Pass, "{subkind}: {d:?}");
    e.report_step_output(task, output(sigma)).unwrap();
}

#[test]
fn registration_accepts_documented_agent() {
    let (e, _) = engine(EngineConfig::default());
    let out = e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    assert!(out.accepted);
    assert_eq!(out.agent_id.as_str(), "a1");
    assert!(out.scores.iter().all(|s| s.value == 0.0));
    assert!(e.agent(&"a1".into()).is_some());
}

#[test]
fn registration_rejects_missing_owner_and_tampering() {
    let (e, _) = engine(EngineConfig::default());
    let mut rec = agent("a1", RiskClass::Low);
    rec.meta.owner = " ".into();
    let out = e.register_agent(rec).unwrap();
    assert!(!out.accepted);
    assert_eq!(out.reasons, vec!["documentation".to_string()]);

    let mut rec = agent("a2", RiskClass::Low);
    rec.definition = serde_json::json!({"prompt": "a2 but edited"});
    let out = e.register_agent(rec).unwrap();
    assert!(!out.accepted);
    assert_eq!(out.reasons, vec!["agent-integrity".to_string()]);
    assert!(e.agent(&"a2".into()).is_none());
}

#[test]
fn duplicate_version_rejected_and_reregistration_retires() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    assert!(matches!(e.register_agent(agent("a1", RiskClass::Low)), Err(EngineError::Conflict(_))));
    let mut v2 = agent("a1", RiskClass::Low);
    v2.meta.version = 2;
    assert!(e.register_agent(v2).unwrap().accepted);
    assert_eq!(e.agent(&"a1".into()).unwrap().version, 2);
}

#[test]
fn retired_agent_cannot_start_tasks() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    e.retire_agent(&"a1".into()).unwrap();
    assert!(matches!(e.admit_task(&"a1".into()), Err(EngineError::Rejected(_))));
    assert!(matches!(e.admit_task(&"nobody".into()), Err(EngineError::NotFound { .. })));
}

#[test]
fn benign_step_passes_with_zero() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    let d = e.evaluate_step(&t, action("db_read")).unwrap();
    assert_eq!(d.outcome, Outcome::Pass);
    assert_eq!(d.v_i, 0.0);
    assert!(d.audit_sequence_no.is_some());
}

#[test]
fn output_updates_vector_and_sigma() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "db_read", 1);
    e.evaluate_step(&t, action("db_read")).unwrap();
    let r = e.report_step_output(&t, output(3)).unwrap();
    assert_eq!(r.vector.sigma_max, 3);
    assert_eq!(r.vector.step_count, 2);
    assert!(matches!(e.report_step_output(&t, output(1)), Err(EngineError::Conflict(_))));

    e.evaluate_step(&t, action("deal_read")).unwrap();
    let before = e.sigma().version;
    e.report_step_output(&t, output(0)).unwrap();
    let sigma = e.sigma();
    assert!(sigma.version > before);
    assert!(sigma.barrier_sides_of(&"a1".into()).unwrap().contains("dealwall:advisory"));
}

#[test]
fn exfiltration_half_steers() {
    // σ_max 2 of ceiling 4 gives exactly 0.5, the default steer threshold.
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "db_read", 2);
    let d = e.evaluate_step(&t, action("email_send")).unwrap();
    assert_eq!(d.v_i, 0.5);
    assert_eq!(d.outcome, Outcome::Steer);
    let id = d.approval_request.unwrap();
    let req = e.approval(&id).unwrap();
    assert_eq!(req.status, ApprovalStatus::Pending);
    assert_eq!(req.context.vector.sigma_max, 2);
    assert_eq!(e.task(&t).unwrap().state, "paused");
    assert!(matches!(e.evaluate_step(&t, action("db_read")), Err(EngineError::Conflict(_))));
}

#[test]
fn barrier_crossing_blocks_and_closes() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "deal_read", 0);
    let d = e.evaluate_step(&t, action("trading_book_read")).unwrap();
    assert_eq!(d.v_i, 1.0);
    assert_eq!(d.outcome, Outcome::Block);
    assert_eq!(d.reason, vec!["information-barrier".to_string()]);
    let done = e.completed();
    assert_eq!(done.len(), 1);
    assert_eq!(done[0].terminal, Terminal::Failure);
    assert_eq!(done[0].v_t, 1.0);
    assert_eq!(done[0].utility, 0.0);
    assert!(matches!(e.evaluate_step(&t, action("db_read")), Err(EngineError::Conflict(_))));
}

#[test]
fn approval_clears_approval_policy_for_high_risk_agent() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("h1", RiskClass::High)).unwrap();
    let t = admitted(e.admit_task(&"h1".into()).unwrap());
    let d = e.evaluate_step(&t, action("email_send")).unwrap();
    // ApprovalRequired is binary, so under default thresholds it blocks outright.
    assert_eq!(d.outcome, Outcome::Block);

    let cfg = EngineConfig { theta_block: 1.01, ..EngineConfig::default() };
    let (e, _) = engine(cfg);
    e.register_agent(agent("h1", RiskClass::High)).unwrap();
    let t = admitted(e.admit_task(&"h1".into()).unwrap());
    let d = e.evaluate_step(&t, action("email_send")).unwrap();
    assert_eq!(d.outcome, Outcome::Steer);
    assert_eq!(d.v_i, 1.0);
    let r = e.resolve_approval(&d.approval_request.unwrap(), Verdict::Approved, "reviewer").unwrap();
    let again = r.decision.unwrap();
    assert_eq!(again.outcome, Outcome::Pass);
    assert_eq!(again.v_i, 0.0);
    let approval = again.per_policy.iter().find(|s| s.policy_id == "approval-required").unwrap();
    assert_eq!(approval.value, 0.0);
    assert!(again.v_i <= d.v_i);
    let view = e.task(&t).unwrap();
    assert!(view.vector.approval_done);
    assert_eq!(view.path.steps.last().unwrap().step_type.subkind, "Human_Approval");
    // Proposing the approved action again returns the stored decision.
    let same = e.evaluate_step(&t, action("email_send")).unwrap();
    assert_eq!(same, again);
}

#[test]
fn rejection_closes_with_steer_score() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "db_read", 3);
    let d = e.evaluate_step(&t, action("email_send")).unwrap();
    assert_eq!(d.v_i, 0.75);
    let id = d.approval_request.unwrap();
    let r = e.resolve_approval(&id, Verdict::Rejected, "reviewer").unwrap();
    let closed = r.closed.unwrap();
    assert_eq!(closed.terminal, Terminal::Failure);
    assert_eq!(closed.v_t, 0.75);
    assert!(matches!(e.resolve_approval(&id, Verdict::Approved, "x"), Err(EngineError::Conflict(_))));
}

#[test]
fn approval_does_not_suppress_blocking_policies() {
    // max_steps 4: at two steps the bound scores 0.5 and exfiltration 0.75, so
    // v = 1 - 0.25 * 0.5 = 0.875 (Steer). The approval step raises the bound to
    // 0.75 and v = 1 - 0.25 * 0.25 = 0.9375 (Block).
    let (e, _) = engine_with(EngineConfig::default(), standard_policy_set("s", 4, 4));
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "db_read", 3);
    step(&e, &t, "db_read", 0);
    let d = e.evaluate_step(&t, action("email_send")).unwrap();
    assert_eq!((d.outcome, d.v_i), (Outcome::Steer, 0.875));
    let r = e.resolve_approval(&d.approval_request.unwrap(), Verdict::Approved, "rev").unwrap();
    let again = r.decision.unwrap();
    assert_eq!((again.outcome, again.v_i), (Outcome::Block, 0.9375));
    let closed = r.closed.unwrap();
    assert_eq!((closed.terminal, closed.v_t), (Terminal::Failure, 0.9375));
}

#[test]
fn approval_expires_to_rejection() {
    let (e, clock) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "db_read", 3);
    let d = e.evaluate_step(&t, action("email_send")).unwrap();
    clock.advance(TimeDelta::hours(25));
    assert!(e.pending_approvals().is_empty());
    assert_eq!(e.approval(&d.approval_request.unwrap()).unwrap().status, ApprovalStatus::Expired);
    assert_eq!(e.completed()[0].terminal, Terminal::Failure);
}

#[test]
fn close_task_values() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    let c = e.close_task(&t, Terminal::Success).unwrap();
    assert_eq!((c.v_t, c.utility), (0.0, 1.0));
    assert!(matches!(e.close_task(&t, Terminal::Success), Err(EngineError::Conflict(_))));
    assert!(matches!(e.close_task(&"nope".into(), Terminal::Success), Err(EngineError::NotFound { .. })));

    // ExecutionBounds with max 5 after one step gives exactly 0.2 on the next proposal.
    let (e, _) = engine_with(EngineConfig::default(), standard_policy_set("s", 4, 5));
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "db_read", 0);
    let d = e.evaluate_step(&t, action("db_read")).unwrap();
    assert_eq!(d.v_i, 0.2);
    e.report_step_output(&t, output(0)).unwrap();
    let c = e.close_task(&t, Terminal::Success).unwrap();
    assert_eq!((c.v_t, c.utility), (0.2, 1.0));
}

#[test]
fn fleet_report_sums() {
    let (e, _) = engine_with(EngineConfig::default(), standard_policy_set("s", 4, 10));
    assert_eq!(e.fleet_report().total_v_sum, 0.0);
    assert_eq!(e.fleet_report().utility_sum, 0.0);
    assert_eq!(e.fleet_report().utilization, Some(0.0));
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    for steps in [1usize, 3] {
        let t = admitted(e.admit_task(&"a1".into()).unwrap());
        for _ in 0..steps {
            step(&e, &t, "db_read", 0);
        }
        e.close_task(&t, Terminal::Success).unwrap();
    }
    // v_T values: 0.0 (first proposal at 0 steps) and 0.2 (third proposal after 2 steps).
    let r = e.fleet_report();
    assert_eq!(r.completed_tasks, 2);
    assert_eq!(r.completed_v_sum, 0.2);
    assert_eq!(r.utility_sum, 2.0);
    assert_eq!(r.utilization, Some(0.2));
}

#[test]
fn zero_budget_with_violations_is_infinite() {
    let cfg = EngineConfig { budget_b: 0.0, ..EngineConfig::default() };
    let (e, _) = engine_with(cfg, standard_policy_set("s", 4, 10));
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "db_read", 0);
    step(&e, &t, "db_read", 0);
    let r = e.fleet_report();
    assert!(r.utilization_infinite);
    assert_eq!(r.utilization, None);
}

#[test]
fn admission_defers_fifo_until_budget_frees() {
    let cfg = EngineConfig { budget_b: 0.1, ..EngineConfig::default() };
    let (e, _) = engine_with(cfg, standard_policy_set("s", 4, 10));
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let a: AgentId = "a1".into();
    let t1 = admitted(e.admit_task(&a).unwrap());
    step(&e, &t1, "db_read", 0);
    step(&e, &t1, "db_read", 0);
    // t1 sits at v = 0.1, not above B, so t2 is admitted.
    let t2 = admitted(e.admit_task(&a).unwrap());
    for _ in 0..3 {
        step(&e, &t2, "db_read", 0);
    }
    // Active sum 0.1 + 0.2 > 0.1: defer.
    let Admission::Deferred { ticket: k1, position: 1 } = e.admit_task(&a).unwrap() else { panic!() };
    let Admission::Deferred { ticket: k2, position: 2 } = e.admit_task(&a).unwrap() else { panic!() };
    assert_eq!(e.ticket_status(&k2).unwrap(), TicketStatus::Queued { position: 2 });
    e.close_task(&t1, Terminal::Success).unwrap();
    // 0.2 is still above B.
    assert_eq!(e.ticket_status(&k1).unwrap(), TicketStatus::Queued { position: 1 });
    // A Blocked task leaving the active set frees the budget.
    step(&e, &t2, "deal_read", 0);
    let d = e.evaluate_step(&t2, action("trading_book_read")).unwrap();
    assert_eq!(d.outcome, Outcome::Block);
    let TicketStatus::Admitted { task_id: a1 } = e.ticket_status(&k1).unwrap() else { panic!() };
    let TicketStatus::Admitted { task_id: a2 } = e.ticket_status(&k2).unwrap() else { panic!() };
    assert!(a1.as_str() < a2.as_str(), "FIFO order");
    // New arrivals queue behind nobody once the queue is empty.
    assert!(matches!(e.admit_task(&a).unwrap(), Admission::Admitted { .. }));
}

#[test]
fn delegation_propagates_child_state() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("adv", RiskClass::Low)).unwrap();
    e.register_agent(agent("res", RiskClass::Low)).unwrap();
    let parent = admitted(e.admit_task(&"adv".into()).unwrap());
    let d = e.evaluate_step(&parent, action("delegate")).unwrap();
    assert_eq!(d.outcome, Outcome::Pass);
    let child = e.delegate(&parent, &"res".into()).unwrap();
    step(&e, &child, "trading_book_read", 4);
    e.close_task(&child, Terminal::Success).unwrap();
    let p = e.task(&parent).unwrap();
    assert_eq!(p.state, "ready");
    assert!(p.vector.sigma_max >= 4);
    assert!(p.vector.touched_barrier_sides.contains("dealwall:trading"));
    assert_eq!(p.path.steps[0].sub_path_id.as_ref(), Some(&child));
    let sigma = e.sigma();
    assert!(sigma.barrier_sides_of(&"adv".into()).unwrap().contains("dealwall:trading"));
    assert_eq!(sigma.delegations.len(), 1);
    // The parent now holds trading-side data, so the advisory side is walled off.
    let d = e.evaluate_step(&parent, action("deal_read")).unwrap();
    assert_eq!(d.outcome, Outcome::Block);
    assert!(matches!(e.delegate(&parent, &"res".into()), Err(EngineError::Conflict(_))));
}

#[test]
fn evaluator_error_fails_closed_and_replays() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    // Not in the registry: PII lookup cannot resolve the tool.
    let d = e.evaluate_step(&t, action("unknown_tool")).unwrap();
    assert_eq!(d.outcome, Outcome::Block);
    assert_eq!(d.reason[0], "fail-closed");
    assert!(matches!(d.fail_closed, Some(FailCause::EvaluationError { .. })));
    let (records, snaps) = e.with_trail(|t| (t.records().to_vec(), t.snapshots().clone()));
    let sets = policy_sets([e.policies().clone()]);
    assert!(all_match(&replay_decisions(&records, &sets, &snaps, ReplayOptions::default())));
}

#[test]
fn injected_fault_and_timeout_fail_closed() {
    let (e, _) = engine(EngineConfig { evaluation_timeout_ms: 5, ..EngineConfig::default() });
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    e.set_faults(FaultPlan { fail_policy: Some("data-exfiltration".into()), delay: None });
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    let d = e.evaluate_step(&t, action("db_read")).unwrap();
    assert_eq!(d.outcome, Outcome::Block);
    assert!(matches!(d.fail_closed, Some(FailCause::InjectedFault { .. })));

    e.set_faults(FaultPlan { fail_policy: None, delay: Some(std::time::Duration::from_millis(20)) });
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    let d = e.evaluate_step(&t, action("db_read")).unwrap();
    assert_eq!(d.outcome, Outcome::Block);
    assert!(matches!(d.fail_closed, Some(FailCause::Timeout { .. })));
    let (records, snaps) = e.with_trail(|t| (t.records().to_vec(), t.snapshots().clone()));
    let sets = policy_sets([e.policies().clone()]);
    let verdicts = replay_decisions(&records, &sets, &snaps, ReplayOptions::default());
    let unverifiable = verdicts.iter().filter(|v| matches!(v.verdict, ReplayVerdict::Unverifiable { .. })).count();
    assert_eq!(unverifiable, 2);
}

#[test]
fn trail_failure_fails_closed_then_recovers() {
    use pathwarden_core::audit::{AuditTrail, FaultSwitch, FaultySink, MemorySink};
    use pathwarden_core::engine::Engine;
    let switch = FaultSwitch::default();
    let trail = AuditTrail::new(Box::new(FaultySink::new(MemorySink::default(), switch.clone())));
    let e = Engine::new(
        EngineConfig::default(),
        standard_policy_set("std-1", 4, 50),
        tools(),
        barriers(),
        trail,
        clock(),
    )
    .unwrap();
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    switch.set(true);
    let d = e.evaluate_step(&t, action("db_read")).unwrap();
    assert_eq!(d.outcome, Outcome::Block);
    assert!(matches!(d.fail_closed, Some(FailCause::AuditWrite { .. })));
    assert_eq!(d.audit_sequence_no, None);
    assert!(e.unwritten_records() > 0);
    switch.set(false);
    let t2 = admitted(e.admit_task(&"a1".into()).unwrap());
    let d = e.evaluate_step(&t2, action("db_read")).unwrap();
    assert_eq!(d.outcome, Outcome::Pass);
    assert_eq!(e.unwritten_records(), 0);
    e.with_trail(|trail| {
        assert_eq!(trail.verify(), ChainStatus::Ok);
        let failed = trail.records().iter().find(|r| r.task_id.as_ref() == Some(&t) && r.kind == RecordKind::StepDecision);
        assert!(matches!(failed.unwrap().fail_closed, Some(FailCause::AuditWrite { .. })));
    });
}

#[test]
fn mid_task_redefinition_blocks() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "db_read", 0);
    e.report_running_definition(&"a1".into(), &serde_json::json!({"prompt": "rewritten"})).unwrap();
    let d = e.evaluate_step(&t, action("db_read")).unwrap();
    assert_eq!(d.outcome, Outcome::Block);
    assert_eq!(d.reason, vec!["agent-integrity".to_string()]);
}

#[test]
fn replay_matches_and_flags_other_versions() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "db_read", 2);
    step(&e, &t, "deal_read", 3);
    e.evaluate_step(&t, action("email_send")).unwrap();
    let (records, snaps) = e.with_trail(|t| (t.records().to_vec(), t.snapshots().clone()));
    let sets = policy_sets([e.policies().clone()]);
    let verdicts = replay_decisions(&records, &sets, &snaps, ReplayOptions::default());
    assert_eq!(verdicts.len(), 4);
    assert!(all_match(&verdicts));
    assert_eq!(verdicts, replay_decisions(&records, &sets, &snaps, ReplayOptions::default()));

    let other = standard_policy_set("std-2", 8, 50);
    let verdicts = replay_decisions(&records, &sets, &snaps, ReplayOptions { policy_set_override: Some(&other) });
    assert!(verdicts.iter().any(|v| matches!(v.verdict, ReplayVerdict::Mismatch { .. })));

    let empty = policy_sets(Vec::<PolicySet>::new());
    let verdicts = replay_decisions(&records, &empty, &snaps, ReplayOptions::default());
    assert!(verdicts.iter().all(|v| matches!(v.verdict, ReplayVerdict::Unverifiable { .. })));
}

#[test]
fn flag_only_scores_are_logged_not_enforced() {
    let mut set = standard_policy_set("flag", 4, 50);
    for p in &mut set.policies {
        if p.policy_id == "information-barrier" {
            *p = p.clone().flag_only();
        }
    }
    let (e, _) = engine_with(EngineConfig::default(), set);
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "deal_read", 0);
    let d = e.evaluate_step(&t, action("trading_book_read")).unwrap();
    assert_eq!(d.outcome, Outcome::Pass);
    let barrier = d.per_policy.iter().find(|s| s.policy_id == "information-barrier").unwrap();
    assert_eq!(barrier.value, 1.0);
    let (records, snaps) = e.with_trail(|t| (t.records().to_vec(), t.snapshots().clone()));
    let sets = policy_sets([e.policies().clone()]);
    assert!(all_match(&replay_decisions(&records, &sets, &snaps, ReplayOptions::default())));
}

#[test]
fn redacted_records_replay_per_input_usage() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    step(&e, &t, "db_read", 1);
    e.evaluate_step(&t, action("db_read")).unwrap();
    e.with_trail_mut(|trail| trail.redact_content_tier(&t).unwrap());
    let (records, snaps) = e.with_trail(|t| (t.records().to_vec(), t.snapshots().clone()));
    let sets = policy_sets([e.policies().clone()]);
    let verdicts = replay_decisions(&records, &sets, &snaps, ReplayOptions::default());
    assert_eq!(verdicts[0].verdict, ReplayVerdict::Match);
    for v in &verdicts[1..] {
        assert_eq!(
            v.verdict,
            ReplayVerdict::UnverifiableContent {
                policies: vec!["pii-predecessor".to_string(), "information-barrier".to_string()]
            }
        );
    }
    e.with_trail(|trail| assert_eq!(trail.verify(), ChainStatus::Ok));
}

#[test]
fn stochastic_unlabeled_output_takes_ceiling() {
    let (e, _) = engine(EngineConfig::default());
    e.register_agent(agent("a1", RiskClass::Low)).unwrap();
    let t = admitted(e.admit_task(&"a1".into()).unwrap());
    e.evaluate_step(&t, action("llm_generate")).unwrap();
    let r = e.report_step_output(&t, Payload::text("generated")).unwrap();
    assert_eq!(r.vector.sigma_max, 4);
}
