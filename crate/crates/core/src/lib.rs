//! Runtime governance for fleets of AI agents.
//!
//! Proposed agent actions are intercepted before they execute, scored by
//! deterministic path-dependent policies, composed into a step-level
//! violation score and mapped to a Pass / Steer / Block intervention. A
//! shared ledger carries cross-agent facts, a fleet budget bounds the running
//! violation score, and every decision lands in a hash-chained audit trail
//! that can be replayed bit-exactly.

pub mod canonical;
pub mod model;
pub mod policy;
pub mod registry;
pub mod state;
pub mod decision;
pub mod audit;
pub mod engine;
pub mod replay;
