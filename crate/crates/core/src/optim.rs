//! Momentum SGD and plateau learning-rate decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use zsl_tensor::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamVisitor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// `v ← μ v + (g + wd·w)`, `w ← w − lr·v`, velocity kept per parameter name.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: HashMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Updates every visited parameter that has an entry in `grads`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<F>(&mut self, grads: &[(String, Vec<f64>)], visit_params: F) -> Result<()>
    where
        F: FnOnce(&mut dyn ParamVisitor),
    {
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Training(format!("non-finite gradient for {name}")));
        }
        let by_name: HashMap<&str, &[f64]> = grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())).collect();
        let cfg = self.config;
        let velocity = &mut self.velocity;
        let mut missing = None;
        let mut update = |name: &str, t: &mut Tensor| {
            let Some(grad) = by_name.get(name) else {
                return;
            };
            if grad.len() != t.numel() {
                missing = Some(name.to_string());
                return;
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((w, vi), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.iter()) {
                *vi = cfg.momentum * *vi + g + cfg.weight_decay * *w;
                *w -= cfg.lr * *vi;
            }
        };
        visit_params(&mut update);
        match missing {
            Some(name) => Err(Error::Training(format!("gradient size mismatch for {name}"))),
            None => Ok(()),
        }
    }
}

fn default_factor() -> f64 {
    0.1
}
fn default_patience() -> usize {
    5
}
fn default_threshold() -> f64 {
    0.01
}
fn default_floor() -> f64 {
    5e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    #[serde(default = "default_factor")]
    pub factor: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Relative improvement needed to reset the patience counter.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: default_factor(),
            patience: default_patience(),
            threshold: default_threshold(),
            floor: default_floor(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Plateau {
    config: PlateauConfig,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(config: PlateauConfig) -> Self {
        Plateau {
            config,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one epoch loss; returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best * (1.0 - self.config.threshold) || self.best.is_infinite() {
            self.best = loss;
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale >= self.config.patience {
            self.stale = 0;
            self.best = loss.min(self.best);
            return (lr * self.config.factor).max(self.config.floor);
        }
        lr
    }
}
