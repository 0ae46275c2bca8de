#![allow(dead_code)]

use std::sync::Arc;

use chrono::{TimeZone, Utc};
use pathwarden_core::audit::AuditTrail;
use pathwarden_core::engine::{Engine, EngineConfig, SimClock};
use pathwarden_core::model::{AgentRecord, ContentLabels, Payload, ProposedAction, RiskClass, StepKind, StepType};
use pathwarden_core::policy::{standard_policy_set, PolicySet};
use pathwarden_core::registry::{BarrierDecl, Barriers, ToolDescriptor, ToolRegistry};

pub fn tools() -> ToolRegistry {
    ToolRegistry::from(vec![
        ToolDescriptor::new("ticket_read", StepKind::Deterministic, 1),
        ToolDescriptor::new("account_lookup", StepKind::Deterministic, 2).with_categories(["personal_data"]),
        ToolDescriptor::new("ticket_reply", StepKind::Deterministic, 0),
        ToolDescriptor::new("db_read", StepKind::Deterministic, 0),
        ToolDescriptor::new("email_send", StepKind::Deterministic, 0).external(),
        ToolDescriptor::new("deal_read", StepKind::Deterministic, 2).with_categories(["dealwall:advisory"]),
        ToolDescriptor::new("trading_book_read", StepKind::Deterministic, 2).with_categories(["dealwall:trading"]),
        ToolDescriptor::new("llm_generate", StepKind::Stochastic, 0),
        ToolDescriptor::new("delegate", StepKind::Composite, 0),
    ])
}

pub fn barriers() -> Barriers {
    Barriers::new([BarrierDecl::new("dealwall", "advisory", "trading")]).unwrap()
}

pub fn clock() -> Arc<SimClock> {
    Arc::new(SimClock::new(Utc.with_ymd_and_hms(2026, 1, 5, 9, 0, 0).unwrap()))
}

pub fn engine_with(config: EngineConfig, set: PolicySet) -> (Engine, Arc<SimClock>) {
    let clock = clock();
    let engine = Engine::new(config, set, tools(), barriers(), AuditTrail::in_memory(), clock.clone()).unwrap();
    (engine, clock)
}

/// The standard set minus ExecutionBounds, so scores are not shifted by path length.
pub fn unbounded_set() -> PolicySet {
    standard_policy_set("std-1", 4, 50).without("std-1", |p| p.policy_id == "execution-bounds")
}

pub fn engine(config: EngineConfig) -> (Engine, Arc<SimClock>) {
    engine_with(config, unbounded_set())
}

pub const ALL_TOOLS: [&str; 9] = [
    "ticket_read",
    "account_lookup",
    "ticket_reply",
    "db_read",
    "email_send",
    "deal_read",
    "trading_book_read",
    "llm_generate",
    "delegate",
];

pub fn agent(id: &str, risk: RiskClass) -> AgentRecord {
    AgentRecord::new(id, "handles work", risk, "ops@example.org", ALL_TOOLS, serde_json::json!({"prompt": id})).unwrap()
}

pub fn action(subkind: &str) -> ProposedAction {
    let kind = tools().resolve(subkind).map(|t| t.kind).unwrap_or(StepKind::Deterministic);
    ProposedAction::new(StepType::new(kind, subkind), Payload::text("input"))
}

pub fn labeled(subkind: &str, categories: &[&str], sigma: Option<u32>) -> ProposedAction {
    let mut a = action(subkind);
    a.input = a.input.with_labels(ContentLabels::new(categories.iter().copied(), sigma));
    a
}

pub fn output(sigma: u32) -> Payload {
    Payload::new("out", ContentLabels::new(Vec::<String>::new(), Some(sigma)))
}
