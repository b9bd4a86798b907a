//! First-order ascent optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum { coefficient: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::adam(),
            learning_rate: 1e-5,
        }
    }
}

/// Optimizer with its per-parameter buffers. Steps *ascend* the supplied direction.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, len: usize) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        let second = match config.kind {
            OptimizerKind::Adam { .. } => vec![0.0; len],
            _ => Vec::new(),
        };
        Ok(OptimizerState {
            config,
            first: vec![0.0; len],
            second,
            steps: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], direction: &[f64]) -> Result<()> {
        if params.len() != self.len() || direction.len() != self.len() {
            return Err(Error::dim("optimizer step", self.len(), direction.len()));
        }
        if let Some(index) = direction.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.steps += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(direction) {
                    *p += lr * g;
                }
            }
            OptimizerKind::Momentum { coefficient } => {
                for ((p, g), vel) in params.iter_mut().zip(direction).zip(&mut self.first) {
                    *vel = coefficient * *vel + g;
                    *p += lr * *vel;
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for i in 0..params.len() {
                    let g = direction[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    params[i] += lr * m / (v.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}
