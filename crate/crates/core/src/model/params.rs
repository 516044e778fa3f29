use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, NormPlacement, Task};
use crate::numerics::{BatchNorm, Matrix};

/// Affine layer `x · weight + bias` with `weight` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, limit: f64) -> Self {
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// All learnable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub(crate) config: ModelConfig,
    pub(crate) encoder: Vec<Dense>,
    pub(crate) norm: Option<BatchNorm>,
    pub(crate) towers: BTreeMap<Task, Vec<Dense>>,
}

impl ModelParams {
    /// He-uniform weights for ReLU layers, Glorot-uniform for the logit layer, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(config.encoder_widths.len());
        let mut fan_in = config.dims.total();
        for &w in &config.encoder_widths {
            encoder.push(Dense::uniform(&mut rng, fan_in, w, (6.0 / fan_in as f64).sqrt()));
            fan_in = w;
        }
        let norm = match config.norm {
            NormPlacement::EncoderOutput => Some(BatchNorm::new(config.representation_width())),
            NormPlacement::EncoderInput => Some(BatchNorm::new(config.dims.total())),
            NormPlacement::None => None,
        };
        let mut towers = BTreeMap::new();
        for &task in &config.tasks {
            let mut layers = Vec::with_capacity(config.tower_widths.len() + 1);
            let mut fan_in = config.representation_width();
            for &w in &config.tower_widths {
                layers.push(Dense::uniform(&mut rng, fan_in, w, (6.0 / fan_in as f64).sqrt()));
                fan_in = w;
            }
            let limit = (6.0 / (fan_in as f64 + 1.0)).sqrt();
            layers.push(Dense::uniform(&mut rng, fan_in, 1, limit));
            towers.insert(task, layers);
        }
        Ok(Self {
            config: config.clone(),
            encoder,
            norm,
            towers,
        })
    }

    /// Parameters with every weight and bias set to zero and identity normalization.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        let mut p = Self::init(config, 0)?;
        for (_, m) in p.trainable_mut() {
            m.data_mut().fill(0.0);
        }
        if let Some(bn) = &mut p.norm {
            *bn = BatchNorm::new(bn.width());
        }
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[Task] {
        &self.config.tasks
    }

    pub fn encoder(&self) -> &[Dense] {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut [Dense] {
        &mut self.encoder
    }

    pub fn norm(&self) -> Option<&BatchNorm> {
        self.norm.as_ref()
    }

    pub fn norm_mut(&mut self) -> Option<&mut BatchNorm> {
        self.norm.as_mut()
    }

    pub fn tower(&self, t: Task) -> Result<&[Dense], ModelError> {
        self.towers
            .get(&t)
            .map(Vec::as_slice)
            .ok_or(ModelError::TaskNotFound(t))
    }

    pub fn tower_mut(&mut self, t: Task) -> Result<&mut [Dense], ModelError> {
        self.towers
            .get_mut(&t)
            .map(Vec::as_mut_slice)
            .ok_or(ModelError::TaskNotFound(t))
    }

    pub fn tower_count(&self) -> usize {
        self.towers.len()
    }

    pub fn has_task(&self, t: Task) -> bool {
        self.towers.contains_key(&t)
    }

    /// Name prefix shared by every parameter block of a tower.
    pub fn tower_prefix(t: Task) -> String {
        format!("tower.{t}.")
    }

    pub(crate) fn encoder_weight_name(i: usize) -> String {
        format!("encoder.{i}.weight")
    }

    pub(crate) fn encoder_bias_name(i: usize) -> String {
        format!("encoder.{i}.bias")
    }

    pub(crate) fn tower_weight_name(t: Task, i: usize) -> String {
        format!("tower.{t}.{i}.weight")
    }

    pub(crate) fn tower_bias_name(t: Task, i: usize) -> String {
        format!("tower.{t}.{i}.bias")
    }

    pub(crate) const NORM_GAMMA: &'static str = "encoder.norm.gamma";
    pub(crate) const NORM_BETA: &'static str = "encoder.norm.beta";
    pub(crate) const NORM_RUNNING_MEAN: &'static str = "encoder.norm.running_mean";
    pub(crate) const NORM_RUNNING_VAR: &'static str = "encoder.norm.running_var";

    /// Learnable blocks in canonical order.
    pub fn trainable(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, d) in self.encoder.iter().enumerate() {
            out.push((Self::encoder_weight_name(i), &d.weight));
            out.push((Self::encoder_bias_name(i), &d.bias));
        }
        if let Some(bn) = &self.norm {
            out.push((Self::NORM_GAMMA.to_string(), &bn.gamma));
            out.push((Self::NORM_BETA.to_string(), &bn.beta));
        }
        for (t, layers) in &self.towers {
            for (i, d) in layers.iter().enumerate() {
                out.push((Self::tower_weight_name(*t, i), &d.weight));
                out.push((Self::tower_bias_name(*t, i), &d.bias));
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, d) in self.encoder.iter_mut().enumerate() {
            out.push((Self::encoder_weight_name(i), &mut d.weight));
            out.push((Self::encoder_bias_name(i), &mut d.bias));
        }
        if let Some(bn) = &mut self.norm {
            out.push((Self::NORM_GAMMA.to_string(), &mut bn.gamma));
            out.push((Self::NORM_BETA.to_string(), &mut bn.beta));
        }
        for (t, layers) in &mut self.towers {
            for (i, d) in layers.iter_mut().enumerate() {
                out.push((Self::tower_weight_name(*t, i), &mut d.weight));
                out.push((Self::tower_bias_name(*t, i), &mut d.bias));
            }
        }
        out
    }

    /// Every stored block, learnable or not, in canonical order.
    pub fn all_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.trainable();
        if let Some(bn) = &self.norm {
            out.push((Self::NORM_RUNNING_MEAN.to_string(), &bn.running_mean));
            out.push((Self::NORM_RUNNING_VAR.to_string(), &bn.running_var));
        }
        out
    }

    pub(crate) fn block_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        if name == Self::NORM_RUNNING_MEAN || name == Self::NORM_RUNNING_VAR {
            let bn = self.norm.as_mut()?;
            return Some(if name == Self::NORM_RUNNING_MEAN {
                &mut bn.running_mean
            } else {
                &mut bn.running_var
            });
        }
        self.trainable_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.all_blocks().iter().all(|(_, m)| m.is_finite())
    }
}
