use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::ModelParams;
use crate::numerics::{Gradients, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `factor` after every `every` steps.
    StepDecay { every: u64, factor: f64 },
}

impl LrSchedule {
    /// Multiplier at 1-based step `t`.
    pub fn factor(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::StepDecay { every, factor } => {
                let k = t.saturating_sub(1) / every.max(1);
                factor.powi(k.min(i32::MAX as u64) as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(TrainError::Config(format!("invalid optimizer settings {self:?}")));
        }
        if let LrSchedule::StepDecay { every, factor } = self.schedule {
            if every == 0 || !(factor > 0.0 && factor.is_finite()) {
                return Err(TrainError::Config(format!(
                    "step decay needs every > 0 and factor > 0, got {every} and {factor}"
                )));
            }
        }
        Ok(())
    }
}

/// Moment estimates for every named parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `blocks`. Gradients are checked for non-finite values
    /// and shape agreement before anything is modified.
    pub fn update(&mut self, blocks: Vec<(String, &mut Matrix)>, grads: &Gradients) -> Result<(), TrainError> {
        for (name, p) in &blocks {
            let g = grads
                .get(name)
                .ok_or_else(|| TrainError::Config(format!("no gradient for block {name}")))?;
            if g.shape() != p.shape() {
                return Err(TrainError::Config(format!(
                    "gradient for {name} is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    block: name.clone(),
                    index: pos,
                    value: g.data()[pos],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let lr = c.lr * c.schedule.factor(self.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in blocks {
            let g = grads.get(&name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            let v = self
                .v
                .entry(name)
                .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Applies one update to every learnable block of `params`.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState) -> Result<(), TrainError> {
    state.update(params.trainable_mut(), grads)
}
