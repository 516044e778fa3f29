//! Shared-bottom multi-task architecture: one encoder over four feature groups, one tower per
//! task, sigmoid outputs.

mod forward;
mod io;
mod params;
mod task;

pub use forward::Traced;
pub use io::{MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use params::{Dense, ModelParams};
pub use task::{Source, Task, TaskSpec};

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, NumericsError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("feature group `{group}` has width {got}, model expects {expected}")]
    FeatureDim {
        group: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("feature groups disagree on batch size: {0:?}")]
    RaggedBatch([usize; 4]),
    #[error("task {0} not found in model")]
    TaskNotFound(Task),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("model file: {0}")]
    Format(String),
    #[error("model file io: {0}")]
    Io(#[from] std::io::Error),
}

/// Widths of the four input feature groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub user: usize,
    pub content: usize,
    pub context: usize,
    pub creative: usize,
}

impl FeatureDims {
    pub fn total(&self) -> usize {
        self.user + self.content + self.context + self.creative
    }
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            user: 16,
            content: 16,
            context: 8,
            creative: 8,
        }
    }
}

/// Where batch normalization sits in the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// After the last encoder layer.
    #[default]
    EncoderOutput,
    /// On the concatenated input, before the first layer.
    EncoderInput,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: FeatureDims,
    /// Hidden widths of the shared encoder; the last one is the representation width.
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of each tower before the scalar logit.
    pub tower_widths: Vec<usize>,
    #[serde(default)]
    pub norm: NormPlacement,
    pub tasks: Vec<Task>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dims: FeatureDims::default(),
            encoder_widths: vec![64, 32],
            tower_widths: vec![16],
            norm: NormPlacement::EncoderOutput,
            tasks: Task::ALL.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let d = &self.dims;
        for (name, w) in [
            ("user", d.user),
            ("content", d.content),
            ("context", d.context),
            ("creative", d.creative),
        ] {
            if w == 0 {
                return Err(ModelError::Config(format!("feature group `{name}` has zero width")));
            }
        }
        if self.encoder_widths.is_empty() {
            return Err(ModelError::Config("encoder needs at least one layer".into()));
        }
        if let Some(i) = self.encoder_widths.iter().position(|&w| w == 0) {
            return Err(ModelError::Config(format!("encoder layer {i} has zero width")));
        }
        if let Some(i) = self.tower_widths.iter().position(|&w| w == 0) {
            return Err(ModelError::Config(format!("tower layer {i} has zero width")));
        }
        if self.tasks.is_empty() {
            return Err(ModelError::Config("no tasks".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(*t) {
                return Err(ModelError::Config(format!("task {t} listed twice")));
            }
        }
        Ok(())
    }

    pub fn representation_width(&self) -> usize {
        *self.encoder_widths.last().expect("validated non-empty")
    }
}

/// A batch of inputs split by feature group; all four matrices share the row count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub user: Matrix,
    pub content: Matrix,
    pub context: Matrix,
    pub creative: Matrix,
}

impl FeatureBatch {
    pub fn rows(&self) -> usize {
        self.user.rows()
    }

    pub fn check(&self, dims: &FeatureDims) -> Result<(), ModelError> {
        let rows = [
            self.user.rows(),
            self.content.rows(),
            self.context.rows(),
            self.creative.rows(),
        ];
        if rows.iter().any(|&r| r != rows[0]) {
            return Err(ModelError::RaggedBatch(rows));
        }
        for (group, m, expected) in [
            ("user", &self.user, dims.user),
            ("content", &self.content, dims.content),
            ("context", &self.context, dims.context),
            ("creative", &self.creative, dims.creative),
        ] {
            if m.cols() != expected {
                return Err(ModelError::FeatureDim {
                    group,
                    expected,
                    got: m.cols(),
                });
            }
        }
        Ok(())
    }

    /// Plain concatenation of the four groups.
    pub fn concat(&self) -> Result<Matrix, ModelError> {
        Ok(Matrix::hcat(&[
            &self.user,
            &self.content,
            &self.context,
            &self.creative,
        ])?)
    }

    pub fn gather(&self, idx: &[usize]) -> FeatureBatch {
        FeatureBatch {
            user: self.user.gather_rows(idx),
            content: self.content.gather_rows(idx),
            context: self.context.gather_rows(idx),
            creative: self.creative.gather_rows(idx),
        }
    }
}
