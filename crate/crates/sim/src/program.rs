//! Scripted agent behavior with seeded stochastic branches.
//!
//! A program is a list of instructions. Branch points draw from named
//! pseudo-random streams; every stream is seeded from `(seed, scope, name)`,
//! so a task's choices do not depend on how many draws other tasks made.

use std::collections::BTreeMap;

use pathwarden_core::model::{AgentId, ContentLabels, Payload, ProposedAction, StepKind, StepType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One proposed action and the output the simulated tool produces if it runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub subkind: String,
    pub kind: StepKind,
    pub input_categories: Vec<String>,
    pub input_sigma: Option<u32>,
    /// Candidate input texts; one is picked from the `text` stream.
    pub texts: Vec<String>,
    pub output_categories: Vec<String>,
    pub output_sigma: Option<u32>,
    /// Name under which the decision on this action is reported.
    pub probe: Option<String>,
}

impl Act {
    pub fn new(subkind: &str, kind: StepKind) -> Self {
        Self {
            subkind: subkind.to_string(),
            kind,
            input_categories: Vec::new(),
            input_sigma: None,
            texts: vec![format!("{subkind} request")],
            output_categories: Vec::new(),
            output_sigma: Some(0),
            probe: None,
        }
    }

    pub fn tool(subkind: &str) -> Self {
        Self::new(subkind, StepKind::Deterministic)
    }

    pub fn model(subkind: &str) -> Self {
        Self::new(subkind, StepKind::Stochastic)
    }

    pub fn input(mut self, categories: &[&str], sigma: Option<u32>) -> Self {
        self.input_categories = categories.iter().map(|c| c.to_string()).collect();
        self.input_sigma = sigma;
        self
    }

    pub fn output(mut self, categories: &[&str], sigma: Option<u32>) -> Self {
        self.output_categories = categories.iter().map(|c| c.to_string()).collect();
        self.output_sigma = sigma;
        self
    }

    pub fn texts(mut self, texts: &[&str]) -> Self {
        self.texts = texts.iter().map(|t| t.to_string()).collect();
        self
    }

    pub fn probe(mut self, name: &str) -> Self {
        self.probe = Some(name.to_string());
        self
    }

    pub fn proposal(&self, streams: &mut Streams) -> ProposedAction {
        let text = streams.pick("text", &self.texts).cloned().unwrap_or_default();
        let labels = ContentLabels::new(self.input_categories.iter().cloned(), self.input_sigma);
        ProposedAction::new(StepType::new(self.kind, &self.subkind), Payload::new(text, labels))
    }

    pub fn result(&self) -> Payload {
        let labels = ContentLabels::new(self.output_categories.iter().cloned(), self.output_sigma);
        Payload::new(format!("{} result", self.subkind), labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instr {
    Act(Act),
    /// Runs `then` with probability `p` (drawn from `stream`), else `otherwise`.
    Branch { stream: String, p: f64, then: Vec<Instr>, otherwise: Vec<Instr> },
    /// A composite step handing `program` to another agent.
    Delegate { via: Act, to: AgentId, program: Vec<Instr> },
}

impl Instr {
    pub fn branch(stream: &str, p: f64, then: Vec<Instr>, otherwise: Vec<Instr>) -> Self {
        Instr::Branch { stream: stream.to_string(), p, then, otherwise }
    }
}

impl From<Act> for Instr {
    fn from(a: Act) -> Self {
        Instr::Act(a)
    }
}

/// Derives a 64-bit seed for a named stream.
pub fn stream_seed(seed: u64, scope: &str, name: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{scope}/{name}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Named random streams for one scope (one task).
#[derive(Debug, Clone)]
pub struct Streams {
    seed: u64,
    scope: String,
    rngs: BTreeMap<String, ChaCha8Rng>,
}

impl Streams {
    pub fn new(seed: u64, scope: impl Into<String>) -> Self {
        Self { seed, scope: scope.into(), rngs: BTreeMap::new() }
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn rng(&mut self, name: &str) -> &mut ChaCha8Rng {
        let (seed, scope) = (self.seed, &self.scope);
        self.rngs
            .entry(name.to_string())
            .or_insert_with(|| ChaCha8Rng::seed_from_u64(stream_seed(seed, scope, name)))
    }

    /// True with probability `p`. `p >= 1` always fires and `p <= 0` never does.
    pub fn chance(&mut self, name: &str, p: f64) -> bool {
        let x: f64 = self.rng(name).random();
        x < p
    }

    pub fn pick<'a, T>(&mut self, name: &str, items: &'a [T]) -> Option<&'a T> {
        if items.is_empty() {
            return None;
        }
        let i = self.rng(name).random_range(0..items.len());
        items.get(i)
    }

    pub fn child(&self, suffix: &str) -> Streams {
        Streams::new(self.seed, format!("{}/{suffix}", self.scope))
    }
}
