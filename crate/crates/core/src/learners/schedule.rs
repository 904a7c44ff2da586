use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear exploration decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
    pub test: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.1,
            decay_steps: 1_000_000,
            test: 0.02,
        }
    }
}

impl EpsilonSchedule {
    pub fn with_decay(decay_steps: u64) -> Self {
        EpsilonSchedule {
            decay_steps,
            ..EpsilonSchedule::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.start) && unit(self.end) && unit(self.test)) || self.end > self.start {
            return Err(Error::Config("epsilon values must lie in [0, 1] with end <= start".into()));
        }
        Ok(())
    }

    pub fn value(&self, t: u64) -> f64 {
        if t >= self.decay_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * t as f64 / self.decay_steps as f64
    }
}
