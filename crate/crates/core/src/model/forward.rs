use std::collections::BTreeMap;

use super::{FeatureBatch, ModelError, ModelParams, NormPlacement, Task};
use crate::numerics::{BatchStats, Matrix, NormMode, NormStats, Tape, Var};

/// Handles into a traced forward pass.
#[derive(Debug)]
pub struct Traced {
    pub representation: Var,
    pub logits: BTreeMap<Task, Var>,
    /// Batch statistics used by train-mode normalization, for the running averages.
    pub batch_stats: Option<BatchStats>,
}

impl ModelParams {
    /// Shared representation `z` for a batch. Train mode normalizes by batch statistics but does
    /// not touch the running averages.
    pub fn encode(&self, x: &FeatureBatch, mode: NormMode) -> Result<Matrix, ModelError> {
        x.check(&self.config.dims)?;
        let mut h = x.concat()?;
        if self.config.norm == NormPlacement::EncoderInput {
            h = self.normalize(&h, mode)?;
        }
        for layer in &self.encoder {
            h = h.matmul(&layer.weight)?.add_row_broadcast(&layer.bias)?.relu();
        }
        if self.config.norm == NormPlacement::EncoderOutput {
            h = self.normalize(&h, mode)?;
        }
        Ok(h)
    }

    fn normalize(&self, h: &Matrix, mode: NormMode) -> Result<Matrix, ModelError> {
        let bn = self.norm.as_ref().expect("norm present when placement is set");
        Ok(match mode {
            NormMode::Infer => bn.infer(h)?,
            NormMode::Train => {
                let mut scratch = bn.clone();
                scratch.forward(h, NormMode::Train)?
            }
        })
    }

    /// Tower logits for task `t` given representations `z`.
    pub fn task_logits(&self, z: &Matrix, t: Task) -> Result<Vec<f64>, ModelError> {
        let tower = self.tower(t)?;
        let (last, hidden) = tower.split_last().expect("tower has a logit layer");
        let mut h = z.clone();
        for layer in hidden {
            h = h.matmul(&layer.weight)?.add_row_broadcast(&layer.bias)?.relu();
        }
        Ok(h.matmul(&last.weight)?.add_row_broadcast(&last.bias)?.into_data())
    }

    /// `p_t = σ(g_t(z))` for every row of `z`.
    pub fn predict_task(&self, z: &Matrix, t: Task) -> Result<Vec<f64>, ModelError> {
        Ok(self
            .task_logits(z, t)?
            .into_iter()
            .map(crate::numerics::sigmoid)
            .collect())
    }

    /// Probabilities for every task from a single inference-mode encoding.
    pub fn predict_all(&self, x: &FeatureBatch) -> Result<BTreeMap<Task, Vec<f64>>, ModelError> {
        let z = self.encode(x, NormMode::Infer)?;
        self.config
            .tasks
            .iter()
            .map(|&t| Ok((t, self.predict_task(&z, t)?)))
            .collect()
    }

    /// Records the forward pass on `tape` with every learnable block registered by name.
    pub fn trace(
        &self,
        tape: &mut Tape,
        x: &FeatureBatch,
        mode: NormMode,
    ) -> Result<Traced, ModelError> {
        x.check(&self.config.dims)?;
        let mut h = tape.constant(x.concat()?);
        let mut batch_stats = None;
        if self.config.norm == NormPlacement::EncoderInput {
            let (v, s) = self.trace_norm(tape, h, mode)?;
            h = v;
            batch_stats = s;
        }
        for (i, layer) in self.encoder.iter().enumerate() {
            let w = tape.param(Self::encoder_weight_name(i), layer.weight.clone());
            let b = tape.param(Self::encoder_bias_name(i), layer.bias.clone());
            let a = tape.matmul(h, w)?;
            let a = tape.add_bias(a, b)?;
            h = tape.relu(a);
        }
        if self.config.norm == NormPlacement::EncoderOutput {
            let (v, s) = self.trace_norm(tape, h, mode)?;
            h = v;
            batch_stats = s;
        }
        let mut logits = BTreeMap::new();
        for (&t, tower) in &self.towers {
            let mut g = h;
            let n = tower.len();
            for (i, layer) in tower.iter().enumerate() {
                let w = tape.param(Self::tower_weight_name(t, i), layer.weight.clone());
                let b = tape.param(Self::tower_bias_name(t, i), layer.bias.clone());
                let a = tape.matmul(g, w)?;
                g = tape.add_bias(a, b)?;
                if i + 1 < n {
                    g = tape.relu(g);
                }
            }
            logits.insert(t, g);
        }
        Ok(Traced {
            representation: h,
            logits,
            batch_stats,
        })
    }

    fn trace_norm(
        &self,
        tape: &mut Tape,
        h: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<BatchStats>), ModelError> {
        let bn = self.norm.as_ref().expect("norm present when placement is set");
        let gamma = tape.param(Self::NORM_GAMMA, bn.gamma.clone());
        let beta = tape.param(Self::NORM_BETA, bn.beta.clone());
        let stats = match mode {
            NormMode::Train => NormStats::Batch,
            NormMode::Infer => NormStats::Fixed {
                mean: bn.running_mean.data(),
                var: bn.running_var.data(),
            },
        };
        Ok(tape.batchnorm(h, gamma, beta, stats)?)
    }
}
