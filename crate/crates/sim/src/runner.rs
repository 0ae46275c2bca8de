//! Drives simulated agents through the engine's public operations.
//!
//! A run is single-threaded. Every round gives each live task one engine
//! interaction in task order; the simulated clock advances one second per
//! proposed step and jumps ahead when every task is waiting on an approval.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use pathwarden_core::audit::{AuditTrail, FileSink};
use pathwarden_core::decision::Outcome;
use pathwarden_core::engine::{
    Admission, Clock, Decision, Engine, EngineConfig, EngineError, FaultPlan, SimClock, TicketStatus, Verdict,
};
use pathwarden_core::model::{AgentId, Payload, RequestId, TaskId, Terminal};
use pathwarden_core::policy::PolicySet;
use pathwarden_core::registry::{Barriers, ToolRegistry};
use pathwarden_core::replay::{policy_sets, replay_decisions, ReplayEntry, ReplayOptions};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{BudgetPoint, FleetMetrics, InterventionCounts, Probe, RunMetrics, TaskOutcome};
use crate::program::{Instr, Streams};
use crate::scenarios::{self, Template};

pub const RESOLVER: &str = "sim-oracle";
const MAX_ROUNDS: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("invalid simulation: {0}")]
    Invalid(String),
    #[error("trail directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulation did not settle after {0} rounds")]
    Stalled(u64),
}

/// How the simulator answers Steer decisions in place of a human reviewer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "oracle", rename_all = "kebab-case")]
pub enum ApprovalOracle {
    AutoApprove { delay_secs: u64 },
    AutoReject,
    /// Leave the request pending for an external reviewer.
    Pause,
}

impl Default for ApprovalOracle {
    fn default() -> Self {
        ApprovalOracle::AutoApprove { delay_secs: 60 }
    }
}

pub fn start_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 1, 5, 9, 0, 0).single().expect("valid start time")
}

pub fn build_engine(
    config: EngineConfig,
    policies: PolicySet,
    tools: ToolRegistry,
    barriers: Barriers,
    trail_dir: Option<&PathBuf>,
) -> Result<(Engine, Arc<SimClock>), SimError> {
    let clock = Arc::new(SimClock::new(start_time()));
    let trail = match trail_dir {
        Some(dir) => AuditTrail::new(Box::new(FileSink::create(dir)?)),
        None => AuditTrail::in_memory(),
    };
    let engine = Engine::new(config, policies, tools, barriers, trail, clock.clone())?;
    Ok((engine, clock))
}

/// Replays every decision in the engine's trail against its own policy set.
pub fn replay_engine(engine: &Engine) -> Vec<ReplayEntry> {
    let sets = policy_sets([engine.policies().clone()]);
    engine.with_trail(|t| replay_decisions(t.records(), &sets, t.snapshots(), ReplayOptions::default()))
}

enum After {
    Output(Payload),
    Delegate { to: AgentId, program: Vec<Instr> },
}

enum State {
    NotStarted,
    Deferred { ticket: String },
    Ready,
    Waiting { request: RequestId, until: DateTime<Utc>, after: After, probe: Option<String> },
    Child(Box<Runner>),
    Paused,
    Done,
}

struct Ctx<'a> {
    engine: &'a Engine,
    clock: &'a SimClock,
    oracle: ApprovalOracle,
    counts: &'a mut InterventionCounts,
}

struct Runner {
    index: usize,
    agent: AgentId,
    template: String,
    task: Option<TaskId>,
    registered: bool,
    admitted: bool,
    frames: Vec<(Vec<Instr>, usize)>,
    streams: Streams,
    state: State,
    probes: Vec<Probe>,
    delegated: Vec<TaskOutcome>,
}

impl Runner {
    fn new(index: usize, agent: AgentId, template: &str, program: Vec<Instr>, streams: Streams, registered: bool) -> Self {
        Self {
            index,
            agent,
            template: template.to_string(),
            task: None,
            registered,
            admitted: false,
            frames: vec![(program, 0)],
            streams,
            state: if registered { State::NotStarted } else { State::Done },
            probes: Vec::new(),
            delegated: Vec::new(),
        }
    }

    fn started(&self) -> bool {
        !matches!(self.state, State::NotStarted)
    }

    fn settled(&self) -> bool {
        match &self.state {
            State::Done | State::Paused => true,
            State::Child(c) => c.settled() && !matches!(c.state, State::Done),
            _ => false,
        }
    }

    fn earliest_wait(&self) -> Option<DateTime<Utc>> {
        match &self.state {
            State::Waiting { until, .. } => Some(*until),
            State::Child(c) => c.earliest_wait(),
            _ => None,
        }
    }

    fn task_id(&self) -> &TaskId {
        self.task.as_ref().expect("a started runner has a task")
    }

    fn next_instr(&mut self) -> Option<Instr> {
        while let Some((instrs, pc)) = self.frames.last_mut() {
            if let Some(i) = instrs.get(*pc) {
                *pc += 1;
                return Some(i.clone());
            }
            self.frames.pop();
        }
        None
    }

    fn tick(&mut self, ctx: &mut Ctx<'_>) -> Result<bool, SimError> {
        match std::mem::replace(&mut self.state, State::Done) {
            State::NotStarted => {
                match ctx.engine.admit_task(&self.agent)? {
                    Admission::Admitted { task_id } => {
                        self.task = Some(task_id);
                        self.admitted = true;
                        self.state = State::Ready;
                    }
                    Admission::Deferred { ticket, .. } => {
                        ctx.counts.deferred_admissions += 1;
                        self.state = State::Deferred { ticket };
                    }
                }
                Ok(true)
            }
            State::Deferred { ticket } => match ctx.engine.ticket_status(&ticket)? {
                TicketStatus::Admitted { task_id } => {
                    self.task = Some(task_id);
                    self.admitted = true;
                    self.state = State::Ready;
                    Ok(true)
                }
                TicketStatus::Queued { .. } => {
                    self.state = State::Deferred { ticket };
                    Ok(false)
                }
                TicketStatus::Rejected { .. } => Ok(true),
            },
            State::Ready => self.advance(ctx),
            State::Waiting { request, until, after, probe } => {
                if ctx.clock.now() < until {
                    self.state = State::Waiting { request, until, after, probe };
                    return Ok(false);
                }
                let res = ctx.engine.resolve_approval(&request, Verdict::Approved, RESOLVER)?;
                ctx.counts.approvals_granted += 1;
                if let Some(d) = res.decision {
                    ctx.counts.count(d.outcome, d.fail_closed.is_some());
                    self.record(&probe, &d, true);
                    self.handle(ctx, d, after, probe)?;
                }
                Ok(true)
            }
            State::Child(mut child) => {
                let progressed = child.tick(ctx)?;
                if matches!(child.state, State::Done) {
                    self.delegated.push(child.outcome(ctx.engine));
                    self.state = State::Ready;
                    return Ok(true);
                }
                self.state = State::Child(child);
                Ok(progressed)
            }
            s @ (State::Paused | State::Done) => {
                self.state = s;
                Ok(false)
            }
        }
    }

    fn advance(&mut self, ctx: &mut Ctx<'_>) -> Result<bool, SimError> {
        loop {
            let Some(instr) = self.next_instr() else {
                ctx.engine.close_task(self.task_id(), Terminal::Success)?;
                self.state = State::Done;
                return Ok(true);
            };
            let (act, after) = match instr {
                Instr::Branch { stream, p, then, otherwise } => {
                    let taken = self.streams.chance(&stream, p);
                    self.frames.push((if taken { then } else { otherwise }, 0));
                    continue;
                }
                Instr::Act(act) => {
                    let out = act.result();
                    (act, After::Output(out))
                }
                Instr::Delegate { via, to, program } => (via, After::Delegate { to, program }),
            };
            let proposal = act.proposal(&mut self.streams);
            ctx.clock.advance(TimeDelta::seconds(1));
            let d = ctx.engine.evaluate_step(self.task_id(), proposal)?;
            ctx.counts.count(d.outcome, d.fail_closed.is_some());
            self.record(&act.probe, &d, false);
            self.handle(ctx, d, after, act.probe)?;
            return Ok(true);
        }
    }

    fn record(&mut self, probe: &Option<String>, d: &Decision, approved: bool) {
        if let Some(name) = probe {
            self.probes.push(Probe {
                name: name.clone(),
                task_id: d.task_id.clone(),
                step_index: d.step_index,
                outcome: d.outcome,
                v_i: d.v_i,
                per_policy: d.per_policy.clone(),
                approved,
                fail_closed: d.fail_closed.is_some(),
            });
        }
    }

    fn handle(&mut self, ctx: &mut Ctx<'_>, d: Decision, after: After, probe: Option<String>) -> Result<(), SimError> {
        self.state = match d.outcome {
            Outcome::Pass => match after {
                After::Output(p) => {
                    ctx.engine.report_step_output(self.task_id(), p)?;
                    State::Ready
                }
                After::Delegate { to, program } => {
                    let child_task = ctx.engine.delegate(self.task_id(), &to)?;
                    let streams = self.streams.child(&format!("delegate-{}", d.step_index));
                    let mut child = Runner::new(self.index, to, "delegated", program, streams, true);
                    child.task = Some(child_task);
                    child.admitted = true;
                    child.state = State::Ready;
                    State::Child(Box::new(child))
                }
            },
            Outcome::Steer => {
                let request = d.approval_request.clone().expect("steer carries a request");
                match ctx.oracle {
                    ApprovalOracle::AutoApprove { delay_secs } => {
                        let until = ctx.clock.now() + TimeDelta::seconds(delay_secs as i64);
                        State::Waiting { request, until, after, probe }
                    }
                    ApprovalOracle::AutoReject => {
                        ctx.engine.resolve_approval(&request, Verdict::Rejected, RESOLVER)?;
                        ctx.counts.approvals_rejected += 1;
                        State::Done
                    }
                    ApprovalOracle::Pause => State::Paused,
                }
            }
            Outcome::Block => State::Done,
        };
        Ok(())
    }

    fn outcome(&self, engine: &Engine) -> TaskOutcome {
        let mut delegated = self.delegated.clone();
        if let State::Child(c) = &self.state {
            delegated.push(c.outcome(engine));
        }
        let mut out = TaskOutcome {
            index: self.index,
            agent_id: self.agent.clone(),
            template: self.template.clone(),
            task_id: self.task.clone(),
            registered: self.registered,
            admitted: self.admitted,
            terminal: None,
            v_t: 0.0,
            utility: 0.0,
            steps: 0,
            probes: self.probes.clone(),
            delegated,
        };
        if let Some(task) = &self.task {
            if let Some(view) = engine.task(task) {
                out.steps = view.path.len();
                out.v_t = view.last_v;
            }
            if let Some(c) = engine.completed_task(task) {
                out.terminal = Some(c.terminal);
                out.v_t = c.v_t;
                out.utility = c.utility;
            }
        }
        out
    }
}

struct Driven {
    runners: Vec<Runner>,
    trace: Vec<BudgetPoint>,
    counts: InterventionCounts,
}

fn drive(
    engine: &Engine,
    clock: &SimClock,
    mut runners: Vec<Runner>,
    concurrency: usize,
    oracle: ApprovalOracle,
    mut counts: InterventionCounts,
) -> Result<Driven, SimError> {
    let mut trace = Vec::new();
    for round in 1..=MAX_ROUNDS {
        let mut ctx = Ctx { engine, clock, oracle, counts: &mut counts };
        let mut live = runners.iter().filter(|r| r.started() && !r.settled()).count();
        let mut progress = false;
        for r in runners.iter_mut() {
            if !r.started() {
                if live >= concurrency {
                    continue;
                }
                live += 1;
            }
            progress |= r.tick(&mut ctx)?;
        }
        if progress {
            let report = engine.fleet_report();
            trace.push(BudgetPoint {
                round,
                time: pathwarden_core::canonical::rfc3339::format(&clock.now()),
                active_tasks: report.active_tasks,
                total_v_sum: report.total_v_sum,
                utilization: report.utilization,
            });
        }
        if runners.iter().all(Runner::settled) {
            return Ok(Driven { runners, trace, counts });
        }
        if !progress {
            match runners.iter().filter_map(Runner::earliest_wait).min() {
                Some(t) if t > clock.now() => clock.set(t),
                Some(_) => {}
                // Only deferred or unstarted tasks remain and nothing will free budget.
                None => return Ok(Driven { runners, trace, counts }),
            }
        }
    }
    Err(SimError::Stalled(MAX_ROUNDS))
}

/// Removes composite steps that delegate to agents outside `registered`.
fn strip_delegations(program: Vec<Instr>, registered: &BTreeSet<AgentId>) -> Vec<Instr> {
    program
        .into_iter()
        .filter_map(|i| match i {
            Instr::Delegate { to, .. } if !registered.contains(&to) => None,
            Instr::Delegate { via, to, program } => {
                Some(Instr::Delegate { via, to, program: strip_delegations(program, registered) })
            }
            Instr::Branch { stream, p, then, otherwise } => Some(Instr::Branch {
                stream,
                p,
                then: strip_delegations(then, registered),
                otherwise: strip_delegations(otherwise, registered),
            }),
            a => Some(a),
        })
        .collect()
}

fn register_all<'a>(
    engine: &Engine,
    records: impl IntoIterator<Item = &'a pathwarden_core::model::AgentRecord>,
    counts: &mut InterventionCounts,
) -> Result<BTreeSet<AgentId>, SimError> {
    let mut accepted = BTreeSet::new();
    for r in records {
        let outcome = engine.register_agent(r.clone())?;
        if outcome.accepted {
            accepted.insert(outcome.agent_id);
        } else {
            counts.rejected_registrations += 1;
        }
    }
    Ok(accepted)
}

// ---- scenarios -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ScenarioOptions {
    pub seed: u64,
    pub config: EngineConfig,
    pub oracle: ApprovalOracle,
    /// Probability that the injected branch of the prompt-injection scenario fires.
    pub injection_probability: f64,
    /// Policy ids dropped from the scenario's set.
    pub removed_policies: Vec<String>,
    pub faults: FaultPlan,
    pub trail_dir: Option<PathBuf>,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            config: EngineConfig::default(),
            oracle: ApprovalOracle::default(),
            injection_probability: 1.0,
            removed_policies: Vec::new(),
            faults: FaultPlan::default(),
            trail_dir: None,
        }
    }
}

/// One expected-outcome assertion of a scenario run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Expectation {
    fn check(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }
}

pub struct ScenarioRun {
    pub scenario: String,
    pub metrics: FleetMetrics,
    pub expectations: Vec<Expectation>,
    pub engine: Engine,
}

impl ScenarioRun {
    pub fn passed(&self) -> bool {
        self.expectations.iter().all(|e| e.passed)
    }
}

fn without(set: &PolicySet, removed: &[String]) -> PolicySet {
    if removed.is_empty() {
        return set.clone();
    }
    let version = format!("{}-without-{}", set.version, removed.join("+"));
    set.without(version, |p| removed.contains(&p.policy_id))
}

pub fn run_scenario(name: &str, opts: &ScenarioOptions) -> Result<ScenarioRun, SimError> {
    let sc = scenarios::scenario(name, opts.injection_probability).ok_or_else(|| SimError::UnknownScenario(name.into()))?;
    let policies = without(&sc.policies, &opts.removed_policies);
    let (engine, clock) =
        build_engine(opts.config.clone(), policies, sc.tools.clone(), sc.barriers.clone(), opts.trail_dir.as_ref())?;
    engine.set_faults(opts.faults.clone());
    let mut counts = InterventionCounts::default();
    let registered = register_all(&engine, sc.agents.iter().map(|(r, _)| r), &mut counts)?;
    let runners = sc
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Runner::new(
                i,
                t.agent.clone(),
                t.template.name(),
                strip_delegations(t.program.clone(), &registered),
                Streams::new(opts.seed, format!("{name}/task-{i}")),
                registered.contains(&t.agent),
            )
        })
        .collect();
    let driven = drive(&engine, &clock, runners, usize::MAX, opts.oracle, counts)?;
    let tasks: Vec<TaskOutcome> = driven.runners.iter().map(|r| r.outcome(&engine)).collect();
    let metrics = FleetMetrics::new(
        vec![RunMetrics::new(name, opts.seed, tasks)],
        engine.config().budget_b,
        driven.trace,
        driven.counts,
    );
    let expectations = expectations(name, &metrics, opts, &engine);
    Ok(ScenarioRun { scenario: name.to_string(), metrics, expectations, engine })
}

fn expectations(name: &str, m: &FleetMetrics, opts: &ScenarioOptions, engine: &Engine) -> Vec<Expectation> {
    let th = opts.config.thresholds();
    let guard = scenarios::guarding_policy(name).unwrap_or_default();
    let enforced = !opts.removed_policies.iter().any(|p| p == guard);
    let task = m.tasks().next();
    let mut out = Vec::new();
    let first = |probe: &str| m.probes(probe).find(|p| !p.approved).cloned();

    match name {
        scenarios::PROMPT_INJECTION => match first(scenarios::DISCLOSURE) {
            Some(p) => {
                let want_score = if enforced { Some(1.0) } else { None };
                let want = th.decide(if enforced { 1.0 } else { 0.0 }, false);
                out.push(Expectation::check(
                    "disclosure-decision",
                    p.outcome == want && p.score(guard) == want_score,
                    format!("disclosure {:?} at v={} ({guard}={:?}); expected {want:?}", p.outcome, p.v_i, p.score(guard)),
                ));
            }
            None => {
                let ok = opts.injection_probability < 1.0 && task.and_then(|t| t.terminal) == Some(Terminal::Success);
                out.push(Expectation::check("benign-branch", ok, "injected branch did not fire; task should complete"));
            }
        },
        scenarios::EXFILTRATION_CHAIN => {
            // Reads reach sigma 3; the exfiltration score is sigma_max / ceiling.
            let exfil = 3.0 / f64::from(scenarios::SIGMA_CEILING);
            let want_v = if enforced { exfil } else { 0.0 };
            let want = th.decide(want_v, false);
            match first(scenarios::SEND) {
                Some(p) => {
                    let score_ok = !enforced || p.score(guard).map(f64::to_bits) == Some(exfil.to_bits());
                    out.push(Expectation::check(
                        "send-decision",
                        score_ok && p.v_i.to_bits() == want_v.to_bits() && p.outcome == want,
                        format!("send {:?} at v={} ({guard}={:?}); expected {want:?} at v={want_v}", p.outcome, p.v_i, p.score(guard)),
                    ));
                    if p.outcome == Outcome::Steer && matches!(opts.oracle, ApprovalOracle::AutoApprove { .. }) {
                        let approved = m.probes(scenarios::SEND).find(|p| p.approved).cloned();
                        let closed = task.map(|t| (t.terminal, t.v_t));
                        let ok = match &approved {
                            Some(a) => {
                                a.outcome == th.decide(a.v_i, true)
                                    && closed.map(|(term, v)| (term, v.to_bits()))
                                        == Some((Some(if a.outcome == Outcome::Pass { Terminal::Success } else { Terminal::Failure }), a.v_i.to_bits()))
                            }
                            None => false,
                        };
                        out.push(Expectation::check(
                            "approval-resumes",
                            ok,
                            format!("post-approval decision {approved:?}; task closed as {closed:?}"),
                        ));
                    }
                }
                None => out.push(Expectation::check("send-decision", false, "send step was never proposed")),
            }
        }
        scenarios::INFORMATION_BARRIER => {
            let fires = enforced && !opts.config.ablate_sigma;
            let want = th.decide(if fires { 1.0 } else { 0.0 }, false);
            match first(scenarios::CROSS_BARRIER) {
                Some(p) => {
                    let want_score = if !enforced { None } else if fires { Some(1.0) } else { Some(0.0) };
                    out.push(Expectation::check(
                        "cross-barrier-decision",
                        p.outcome == want && p.score(guard) == want_score,
                        format!("cross-barrier {:?} at v={} ({guard}={:?}); expected {want:?}", p.outcome, p.v_i, p.score(guard)),
                    ));
                }
                None => out.push(Expectation::check("cross-barrier-decision", false, "cross-barrier step was never proposed")),
            }
        }
        _ => {}
    }
    out.push(Expectation::check("sums-consistent", m.sums_consistent(), "aggregate sums equal recomputation"));
    let chain = engine.with_trail(|t| t.verify());
    out.push(Expectation::check(
        "trail-chain",
        chain == pathwarden_core::audit::ChainStatus::Ok,
        format!("{chain:?}"),
    ));
    if opts.faults == FaultPlan::default() {
        let replay = replay_engine(engine);
        let bad = replay.iter().filter(|e| e.verdict != pathwarden_core::replay::ReplayVerdict::Match).count();
        out.push(Expectation::check("replay-closure", bad == 0, format!("{bad} of {} decisions did not replay", replay.len())));
    }
    out
}

// ---- fleet ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FleetOptions {
    pub agents: usize,
    pub tasks: usize,
    pub seed: u64,
    pub config: EngineConfig,
    pub oracle: ApprovalOracle,
    pub injection_probability: f64,
    /// Tasks running at once; defaults to the number of agents.
    pub concurrency: Option<usize>,
    /// Replaces the fleet's standard policy set.
    pub policies: Option<PolicySet>,
    pub trail_dir: Option<PathBuf>,
}

impl Default for FleetOptions {
    fn default() -> Self {
        Self {
            agents: 20,
            tasks: 200,
            seed: 0,
            config: EngineConfig::default(),
            oracle: ApprovalOracle::default(),
            injection_probability: 0.5,
            concurrency: None,
            policies: None,
            trail_dir: None,
        }
    }
}

pub struct FleetRun {
    pub metrics: FleetMetrics,
    pub engine: Engine,
}

pub fn fleet_agent_id(i: usize) -> AgentId {
    AgentId::new(format!("{}-{i:03}", Template::ALL[i % 4].name()))
}

pub fn run_fleet(opts: &FleetOptions) -> Result<FleetRun, SimError> {
    if opts.agents == 0 || opts.tasks == 0 {
        return Err(SimError::Invalid("a fleet needs at least one agent and one task".into()));
    }
    let policies = opts.policies.clone().unwrap_or_else(scenarios::fleet_policy_set);
    let (engine, clock) =
        build_engine(opts.config.clone(), policies, scenarios::tools(), scenarios::barriers(), opts.trail_dir.as_ref())?;
    let mut counts = InterventionCounts::default();
    let agents: Vec<(AgentId, Template)> =
        (0..opts.agents).map(|i| (fleet_agent_id(i), Template::ALL[i % 4])).collect();
    let records: Vec<_> = agents.iter().map(|(id, t)| scenarios::agent_record(id.as_str(), *t)).collect();
    let registered = register_all(&engine, &records, &mut counts)?;

    let trader_for = |i: usize| -> Option<AgentId> {
        let traders: Vec<&AgentId> = agents
            .iter()
            .filter(|(id, t)| *t == Template::Trading && registered.contains(id))
            .map(|(id, _)| id)
            .collect();
        let after = agents.iter().skip(i + 1).find(|(id, _)| traders.contains(&id)).map(|(id, _)| id);
        after.or(traders.first().copied()).cloned()
    };

    let mut assign = Streams::new(opts.seed, "fleet");
    let indices: Vec<usize> = (0..opts.agents).collect();
    let runners = (0..opts.tasks)
        .map(|j| {
            let a = *assign.pick("assign", &indices).expect("at least one agent");
            let (id, template) = &agents[a];
            let program = match template {
                Template::Support => scenarios::support_program(opts.injection_probability),
                Template::Reporting => scenarios::reporting_program(),
                Template::Advisory => scenarios::advisory_program(trader_for(a).as_ref()),
                Template::Trading => scenarios::trading_program(),
            };
            Runner::new(
                j,
                id.clone(),
                template.name(),
                program,
                Streams::new(opts.seed, format!("task-{j}")),
                registered.contains(id),
            )
        })
        .collect();
    let concurrency = opts.concurrency.unwrap_or(opts.agents).max(1);
    let driven = drive(&engine, &clock, runners, concurrency, opts.oracle, counts)?;
    let tasks: Vec<TaskOutcome> = driven.runners.iter().map(|r| r.outcome(&engine)).collect();
    let metrics = FleetMetrics::new(
        vec![RunMetrics::new("fleet", opts.seed, tasks)],
        engine.config().budget_b,
        driven.trace,
        driven.counts,
    );
    Ok(FleetRun { metrics, engine })
}
