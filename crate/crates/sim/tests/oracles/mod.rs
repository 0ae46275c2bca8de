//! Independent reference computations used by the acceptance and property tests.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use pathwarden_core::canonical::Digest;
use pathwarden_core::model::{
    AgentId, AgentMetadata, ContentLabels, ExecutionPath, Payload, ProposedAction, RiskClass, Step, StepKind, StepType,
    TaskId, HUMAN_APPROVAL, PERSONAL_DATA, PII_CHECK,
};
use pathwarden_core::policy::{PolicySpec, PolicyTemplate};
use pathwarden_core::registry::{effective_input_labels, effective_output_labels, Barriers, ToolDescriptor, ToolRegistry};
use pathwarden_core::state::{SharedLedger, TaskStateVector};
use rand::Rng;

// ---- exact dyadic arithmetic ----------------------------------------------

/// `num / 2^scale`, exact.
#[derive(Debug, Clone)]
pub struct Dyadic {
    num: BigInt,
    scale: u64,
}

impl Dyadic {
    pub fn zero() -> Self {
        Self { num: BigInt::zero(), scale: 0 }
    }

    pub fn one() -> Self {
        Self { num: BigInt::one(), scale: 0 }
    }

    /// Exact value of a finite, non-negative f64 below 2^53.
    pub fn from_f64(x: f64) -> Self {
        assert!(x.is_finite() && x >= 0.0 && x < 9.0e15, "{x}");
        let bits = x.to_bits();
        let biased = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, exp) = if biased == 0 { (frac, -1074) } else { (frac | (1u64 << 52), biased - 1075) };
        let d = if exp >= 0 {
            Self { num: BigInt::from(mant) << exp as usize, scale: 0 }
        } else {
            Self { num: BigInt::from(mant), scale: (-exp) as u64 }
        };
        d.normalized()
    }

    fn normalized(mut self) -> Self {
        if self.num.is_zero() {
            self.scale = 0;
            return self;
        }
        let tz = self.num.trailing_zeros().unwrap_or(0).min(self.scale);
        self.num >>= tz as usize;
        self.scale -= tz;
        self
    }

    fn aligned(a: &Self, b: &Self) -> (BigInt, BigInt, u64) {
        let s = a.scale.max(b.scale);
        (a.num.clone() << (s - a.scale) as usize, b.num.clone() << (s - b.scale) as usize, s)
    }

    pub fn sub(&self, other: &Self) -> Self {
        let (a, b, s) = Self::aligned(self, other);
        Self { num: a - b, scale: s }.normalized()
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self { num: &self.num * &other.num, scale: self.scale + other.scale }.normalized()
    }

    pub fn abs(&self) -> Self {
        Self { num: self.num.abs(), scale: self.scale }
    }

    pub fn cmp(&self, other: &Self) -> Ordering {
        let (a, b, _) = Self::aligned(self, other);
        a.cmp(&b)
    }
}

/// `1 − Π(1 − π)`, exactly.
pub fn exact_composition(values: &[f64]) -> Dyadic {
    let one = Dyadic::one();
    let product = values.iter().fold(Dyadic::one(), |acc, &v| acc.mul(&one.sub(&Dyadic::from_f64(v))));
    one.sub(&product)
}

/// True iff `|got − exact| <= tol`, decided exactly.
pub fn within(got: f64, exact: &Dyadic, tol: f64) -> bool {
    Dyadic::from_f64(got).sub(exact).abs().cmp(&Dyadic::from_f64(tol)) != Ordering::Greater
}

/// Random score lists mixing uniform values, exact 0 and 1, dyadic values and tiny values.
pub fn random_scores(rng: &mut impl Rng, max_len: usize) -> Vec<f64> {
    let len = rng.random_range(0..=max_len);
    (0..len)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            2 => f64::from(rng.random_range(0..=16u32)) / 16.0,
            3 => rng.random::<f64>() * 1e-9,
            4 => 1.0 - rng.random::<f64>() * 1e-9,
            _ => rng.random::<f64>(),
        })
        .collect()
}

// ---- from-scratch policy evaluation over the raw path -----------------------

/// Raw path with the sub-paths of its composite steps.
#[derive(Debug, Clone)]
pub struct RawPath {
    pub path: ExecutionPath,
    /// One entry per composite step, in order.
    pub children: Vec<RawPath>,
}

impl RawPath {
    fn child_of(&self, step: &Step) -> Option<&RawPath> {
        let id = step.sub_path_id.as_ref()?;
        self.children.iter().find(|c| &c.path.task_id == id)
    }

    /// Highest sensitivity anywhere in the path, descending into sub-paths.
    pub fn sigma_max(&self) -> u32 {
        self.path
            .steps
            .iter()
            .map(|s| {
                let own = s.input.labels.sensitivity.unwrap_or(0).max(
                    s.output.as_ref().and_then(|o| o.labels.sensitivity).unwrap_or(0),
                );
                own.max(self.child_of(s).map_or(0, RawPath::sigma_max))
            })
            .max()
            .unwrap_or(0)
    }

    pub fn has_subkind(&self, subkind: &str) -> bool {
        self.path.steps.iter().any(|s| s.step_type.subkind == subkind)
    }

    pub fn barrier_sides(&self, barriers: &Barriers) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for s in &self.path.steps {
            let mut cats: Vec<String> = s.input.labels.categories.iter().cloned().collect();
            if let Some(o) = &s.output {
                cats.extend(o.labels.categories.iter().cloned());
            }
            for c in cats {
                if barriers.classify(&c).expect("declared").is_some() {
                    out.insert(c);
                }
            }
            if let Some(child) = self.child_of(s) {
                out.extend(child.barrier_sides(barriers));
            }
        }
        out
    }

    pub fn categories(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for s in &self.path.steps {
            out.extend(s.input.labels.categories.iter().cloned());
            if let Some(o) = &s.output {
                out.extend(o.labels.categories.iter().cloned());
            }
        }
        out
    }

    /// The state vector recomputed from scratch.
    pub fn vector(&self, barriers: &Barriers) -> TaskStateVector {
        TaskStateVector {
            step_count: self.path.steps.len() as u64,
            sigma_max: self.sigma_max(),
            approval_done: self.has_subkind(HUMAN_APPROVAL),
            pii_check_done: self.has_subkind(PII_CHECK),
            touched_categories: self.categories(),
            touched_barrier_sides: self.barrier_sides(barriers),
        }
    }
}

pub struct OracleCtx<'a> {
    pub agent: &'a AgentMetadata,
    pub running: Digest,
    pub raw: &'a RawPath,
    pub proposed: &'a ProposedAction,
    pub ledger: &'a SharedLedger,
    pub tools: &'a ToolRegistry,
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Score of a per-step policy computed directly from the raw path.
pub fn oracle_score(policy: &PolicySpec, c: &OracleCtx<'_>) -> f64 {
    let tool = c.tools.resolve(&c.proposed.step_type.subkind).expect("known tool");
    let categories = effective_input_labels(&tool, &c.proposed.input).categories;
    match &policy.template {
        PolicyTemplate::AgentIntegrity => bit(c.running != c.agent.definition_hash),
        PolicyTemplate::AccessControl => bit(!c.agent.allowed_tools.contains(&c.proposed.step_type.subkind)),
        PolicyTemplate::PiiPredecessor { category } => {
            bit(categories.contains(category) && !c.raw.has_subkind(PII_CHECK))
        }
        PolicyTemplate::ApprovalRequired { risk_classes } => bit(
            c.agent.risk_class.is_some_and(|r| risk_classes.contains(&r))
                && tool.external
                && !c.raw.has_subkind(HUMAN_APPROVAL),
        ),
        PolicyTemplate::DataExfiltration { sigma_ceiling } => {
            if tool.external {
                (f64::from(c.raw.sigma_max()) / f64::from(*sigma_ceiling)).min(1.0)
            } else {
                0.0
            }
        }
        PolicyTemplate::InformationBarrier { .. } => {
            let recorded = c.ledger.barrier_sides_of(&c.agent.agent_id).cloned().unwrap_or_default();
            let fires = categories.iter().any(|tag| {
                let Some((name, side)) = tag.split_once(':') else { return false };
                let Some(decl) = c.ledger.active_barriers.get(name) else { return false };
                let Some(other) = decl.other_side(side) else { return false };
                recorded.contains(&format!("{name}:{other}"))
            });
            bit(fires)
        }
        PolicyTemplate::ExecutionBounds { max_steps } => {
            (c.raw.path.steps.len() as f64 / *max_steps as f64).min(1.0)
        }
        PolicyTemplate::Documentation | PolicyTemplate::TimeRestriction { .. } => {
            panic!("{} is not a per-step policy", policy.policy_id)
        }
    }
}

// ---- random generators ------------------------------------------------------

pub const CATEGORY_POOL: [&str; 5] = [PERSONAL_DATA, "finance", "dealwall:advisory", "dealwall:trading", "hr"];

pub fn random_labels(rng: &mut impl Rng, ceiling: u32) -> ContentLabels {
    let cats: Vec<&str> = CATEGORY_POOL.iter().copied().filter(|_| rng.random_bool(0.2)).collect();
    let sigma = if rng.random_bool(0.3) { None } else { Some(rng.random_range(0..=ceiling)) };
    ContentLabels::new(cats, sigma)
}

pub fn random_payload(rng: &mut impl Rng, ceiling: u32) -> Payload {
    let len = rng.random_range(0..24);
    let data: Vec<u8> = (0..len).map(|_| rng.random()).collect();
    Payload::new(data, random_labels(rng, ceiling))
}

pub fn random_tool(rng: &mut impl Rng, tools: &ToolRegistry, reserved: bool) -> ToolDescriptor {
    let mut names: Vec<String> =
        tools.iter().filter(|t| t.kind != StepKind::Composite).map(|t| t.subkind.clone()).collect();
    if reserved {
        names.push(PII_CHECK.into());
        names.push(HUMAN_APPROVAL.into());
    }
    let i = rng.random_range(0..names.len());
    tools.resolve(&names[i]).expect("listed")
}

/// A completed step as the engine stores it: effective labels on both sides.
pub fn random_step(rng: &mut impl Rng, tools: &ToolRegistry, ceiling: u32) -> Step {
    let tool = random_tool(rng, tools, true);
    let input = random_payload(rng, ceiling);
    let output = random_payload(rng, ceiling);
    Step {
        step_type: StepType::new(tool.kind, &tool.subkind),
        input: input.clone().with_labels(effective_input_labels(&tool, &input)),
        output: Some(output.clone().with_labels(effective_output_labels(&tool, &output, ceiling))),
        sub_path_id: None,
    }
}

/// Builds a random path, and alongside it the incrementally maintained vector
/// computed the way the engine does (fold per step, absorb children).
/// Returns the raw path and the vector after every prefix.
pub fn random_path(
    rng: &mut impl Rng,
    id: &str,
    max_len: usize,
    depth: u32,
    tools: &ToolRegistry,
    barriers: &Barriers,
    ceiling: u32,
) -> (RawPath, Vec<TaskStateVector>) {
    let len = rng.random_range(0..=max_len);
    let mut raw = RawPath { path: ExecutionPath::new(TaskId::new(id), AgentId::new("agent-x")), children: Vec::new() };
    let mut vector = TaskStateVector::default();
    let mut prefixes = vec![vector.clone()];
    for i in 0..len {
        let composite = depth > 0 && rng.random_bool(0.1);
        if composite {
            let child_id = format!("{id}.{i}");
            let (child, child_vectors) = random_path(rng, &child_id, 10, depth - 1, tools, barriers, ceiling);
            let child_vector = child_vectors.last().expect("at least the empty prefix").clone();
            let delegate = tools.iter().find(|t| t.kind == StepKind::Composite).expect("registry has a composite tool");
            let input = random_payload(rng, ceiling);
            let step = Step {
                step_type: StepType::new(StepKind::Composite, &delegate.subkind),
                input: input.clone().with_labels(effective_input_labels(delegate, &input)),
                output: Some(Payload::new(
                    "child summary",
                    ContentLabels {
                        categories: child_vector.touched_categories.clone(),
                        sensitivity: Some(child_vector.sigma_max),
                    },
                )),
                sub_path_id: Some(TaskId::new(&child_id)),
            };
            vector.apply(&step, barriers).expect("declared tags");
            vector.absorb_child(&child_vector);
            raw.path.steps.push(step);
            raw.children.push(child);
        } else {
            let step = random_step(rng, tools, ceiling);
            vector.apply(&step, barriers).expect("declared tags");
            raw.path.steps.push(step);
        }
        prefixes.push(vector.clone());
    }
    (raw, prefixes)
}

/// The first `n` steps of `raw`, keeping only the sub-paths they reference.
pub fn prefix(raw: &RawPath, n: usize) -> RawPath {
    let mut p = raw.clone();
    p.path.steps.truncate(n);
    let ids: BTreeSet<TaskId> = p.path.steps.iter().filter_map(|s| s.sub_path_id.clone()).collect();
    p.children.retain(|c| ids.contains(&c.path.task_id));
    p
}

/// A random Σ over the given agents and barriers.
pub fn random_ledger(rng: &mut impl Rng, agents: &[AgentId], barriers: &Barriers) -> SharedLedger {
    let mut l = SharedLedger::new("org", barriers.clone());
    let sides: Vec<String> = barriers.iter().flat_map(|b| [b.tag(0), b.tag(1)]).collect();
    for a in agents {
        let chosen: BTreeSet<String> = sides.iter().filter(|_| rng.random_bool(0.4)).cloned().collect();
        l.add_barrier_sides(a, &chosen).expect("declared sides");
    }
    for i in 0..rng.random_range(0..5) {
        l.raise_task_sigma(&TaskId::new(format!("task-{i}")), rng.random_range(0..=4));
    }
    l
}

pub fn random_vector(rng: &mut impl Rng, barriers: &Barriers) -> TaskStateVector {
    let sides: Vec<String> = barriers.iter().flat_map(|b| [b.tag(0), b.tag(1)]).collect();
    TaskStateVector {
        step_count: rng.random_range(0..200),
        sigma_max: rng.random_range(0..=4),
        approval_done: rng.random(),
        pii_check_done: rng.random(),
        touched_categories: CATEGORY_POOL.iter().filter(|_| rng.random_bool(0.3)).map(|s| s.to_string()).collect(),
        touched_barrier_sides: sides.into_iter().filter(|_| rng.random_bool(0.3)).collect(),
    }
}

pub fn risk(rng: &mut impl Rng) -> RiskClass {
    if rng.random() {
        RiskClass::High
    } else {
        RiskClass::Low
    }
}
