use serde::{Deserialize, Serialize};

use super::{ApproxError, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `v <- mu*v + g; p <- p - lr*v`.
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW,
}

/// Settings for both optimizers; fields the chosen kind does not use are
/// ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate: 3e-4,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Self {
        let second = match config.kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::AdamW => vec![0.0; param_count],
        };
        Self {
            config,
            first: vec![0.0; param_count],
            second,
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One descent step. Nothing is modified if any gradient entry is not
    /// finite.
    pub fn step(&mut self, params: &mut ParamVector, gradient: &[f64]) -> Result<(), ApproxError> {
        if gradient.len() != params.len() || self.first.len() != params.len() {
            return Err(ApproxError::Dimension {
                context: "optimizer step",
                expected: params.len(),
                actual: gradient.len(),
            });
        }
        if let Some((index, &value)) = gradient.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(ApproxError::NonFinite { index, value });
        }
        self.steps += 1;
        let OptimizerConfig {
            learning_rate: lr,
            momentum,
            beta1,
            beta2,
            epsilon,
            weight_decay,
            ..
        } = self.config;
        let p = params.as_mut_slice();
        match self.config.kind {
            OptimizerKind::Sgd => {
                for ((w, v), g) in p.iter_mut().zip(&mut self.first).zip(gradient) {
                    *v = momentum * *v + g;
                    *w -= lr * *v;
                }
            }
            OptimizerKind::AdamW => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((w, m), v), &g) in p
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .zip(gradient)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + epsilon);
                    *w -= lr * (update + weight_decay * *w);
                }
            }
        }
        Ok(())
    }
}
