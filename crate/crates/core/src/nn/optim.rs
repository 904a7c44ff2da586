//! First-order optimizers over flat parameter slices.
//!
//! The learning rate decays as `lr / (1 + decay * iterations)`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn adam_lr() -> f64 {
    0.00025
}
fn rmsprop_lr() -> f64 {
    0.0001
}
fn rmsprop_decay() -> f64 {
    1e-6
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn rho() -> f64 {
    0.9
}
fn rmsprop_eps() -> f64 {
    1e-7
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        learning_rate: f64,
        #[serde(default)]
        decay: f64,
    },
    Adam {
        #[serde(default = "adam_lr")]
        learning_rate: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        epsilon: f64,
        #[serde(default)]
        decay: f64,
    },
    Rmsprop {
        #[serde(default = "rmsprop_lr")]
        learning_rate: f64,
        #[serde(default = "rho")]
        rho: f64,
        #[serde(default = "rmsprop_eps")]
        epsilon: f64,
        #[serde(default = "rmsprop_decay")]
        decay: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    RmsProp,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig::Sgd {
            learning_rate,
            decay: 0.0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            beta1: beta1(),
            beta2: beta2(),
            epsilon: adam_eps(),
            decay: 0.0,
        }
    }

    pub fn rmsprop(learning_rate: f64, decay: f64) -> Self {
        OptimizerConfig::Rmsprop {
            learning_rate,
            rho: rho(),
            epsilon: rmsprop_eps(),
            decay,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerConfig::Sgd { .. } => OptimizerKind::Sgd,
            OptimizerConfig::Adam { .. } => OptimizerKind::Adam,
            OptimizerConfig::Rmsprop { .. } => OptimizerKind::RmsProp,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { learning_rate, .. }
            | OptimizerConfig::Adam { learning_rate, .. }
            | OptimizerConfig::Rmsprop { learning_rate, .. } => learning_rate,
        }
    }

    pub fn decay(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { decay, .. }
            | OptimizerConfig::Adam { decay, .. }
            | OptimizerConfig::Rmsprop { decay, .. } => decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if !(self.decay().is_finite() && self.decay() >= 0.0) {
            return Err(Error::Config("decay must be finite and >= 0".into()));
        }
        match *self {
            OptimizerConfig::Adam { beta1, beta2, epsilon, .. } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                    return Err(Error::Config("Adam needs beta in [0, 1) and epsilon > 0".into()));
                }
            }
            OptimizerConfig::Rmsprop { rho, epsilon, .. } => {
                if !(0.0..1.0).contains(&rho) || epsilon <= 0.0 {
                    return Err(Error::Config("RMSProp needs rho in [0, 1) and epsilon > 0".into()));
                }
            }
            OptimizerConfig::Sgd { .. } => {}
        }
        Ok(())
    }
}

/// Optimizer configuration plus per-parameter moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub iterations: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, len: usize) -> Result<Self> {
        config.validate()?;
        let (m, v) = match config.kind() {
            OptimizerKind::Sgd => (0, 0),
            OptimizerKind::Adam => (len, len),
            OptimizerKind::RmsProp => (0, len),
        };
        Ok(OptimizerState {
            config,
            iterations: 0,
            first_moment: vec![0.0; m],
            second_moment: vec![0.0; v],
        })
    }

    pub fn current_learning_rate(&self) -> f64 {
        self.config.learning_rate() / (1.0 + self.config.decay() * self.iterations as f64)
    }

    /// Applies one update. Non-finite gradients abort the step before anything is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Length {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        let moment_len = self.second_moment.len().max(self.first_moment.len());
        if moment_len != 0 && moment_len != params.len() {
            return Err(Error::Length {
                expected: moment_len,
                actual: params.len(),
            });
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient passed to optimizer".into()));
        }
        let lr = self.current_learning_rate();
        match self.config {
            OptimizerConfig::Sgd { .. } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerConfig::Adam {
                beta1,
                beta2,
                epsilon,
                ..
            } => {
                let t = (self.iterations + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                }
            }
            OptimizerConfig::Rmsprop { rho, epsilon, .. } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.second_moment) {
                    *v = rho * *v + (1.0 - rho) * g * g;
                    *p -= lr * g / (v.sqrt() + epsilon);
                }
            }
        }
        self.iterations += 1;
        Ok(())
    }
}
