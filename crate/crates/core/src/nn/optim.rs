use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { momentum, .. } => OptimizerConfig::Sgd { lr, momentum },
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => OptimizerConfig::Adam { lr, beta1, beta2, eps },
        }
    }
}

/// SGD-with-momentum or Adam over the trainable entries of a [`ParamSet`].
/// Running batch-norm statistics are never touched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        if !grads.matches(params) {
            return Err(Error::structure(
                "gradient keys do not match the trainable parameters",
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        for (name, g) in grads.iter() {
            let values = params.values_mut(name)?;
            match self.config {
                OptimizerConfig::Sgd { lr, momentum } => {
                    if momentum == 0.0 {
                        for (p, gv) in values.iter_mut().zip(&g.data) {
                            *p -= lr * gv;
                        }
                    } else {
                        let vel = self
                            .first
                            .entry(name.to_string())
                            .or_insert_with(|| vec![0.0; g.data.len()]);
                        for ((p, gv), v) in values.iter_mut().zip(&g.data).zip(vel.iter_mut()) {
                            *v = momentum * *v + gv;
                            *p -= lr * *v;
                        }
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let m = self
                        .first
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; g.data.len()]);
                    let v = self
                        .second
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; g.data.len()]);
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (((p, gv), mi), vi) in values.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gv;
                        *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
