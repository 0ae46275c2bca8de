//! The decision function δ mapping a step score to an intervention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Pass,
    Steer,
    Block,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid thresholds: {0}")]
pub struct ThresholdError(String);

/// `theta_steer <= theta_block`. Values above 1 are accepted and mean the
/// corresponding outcome never fires; 0 means it always fires.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub theta_steer: f64,
    pub theta_block: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { theta_steer: 0.5, theta_block: 0.9 }
    }
}

impl Thresholds {
    pub fn new(theta_steer: f64, theta_block: f64) -> Result<Self, ThresholdError> {
        let t = Self { theta_steer, theta_block };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ThresholdError> {
        let finite = self.theta_steer.is_finite() && self.theta_block.is_finite();
        if !finite || self.theta_steer < 0.0 || self.theta_block < 0.0 {
            return Err(ThresholdError(format!("{self:?}: thresholds must be finite and >= 0")));
        }
        if self.theta_steer > self.theta_block {
            return Err(ThresholdError(format!("{self:?}: theta_steer must not exceed theta_block")));
        }
        Ok(())
    }

    /// δ(v). `approved` marks a re-evaluation of an action a reviewer has
    /// approved: the Steer band is then satisfied and yields Pass, while the
    /// Block band still blocks.
    pub fn decide(&self, v: f64, approved: bool) -> Outcome {
        if v >= self.theta_block {
            Outcome::Block
        } else if v >= self.theta_steer && !approved {
            Outcome::Steer
        } else {
            Outcome::Pass
        }
    }
}
