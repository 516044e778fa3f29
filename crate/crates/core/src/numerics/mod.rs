//! Dense `f64` linear algebra and a reverse-mode tape, enough to train small MLPs.

mod batchnorm;
mod matrix;
mod tape;

pub use batchnorm::{
    scale_shift, standardize, BatchNorm, BatchStats, NormMode, BN_EPSILON, BN_MOMENTUM,
};
pub use matrix::{bce_with_logit, sigmoid, softplus, Matrix};
pub use tape::{Gradients, NormStats, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {}x{} vs {}x{}", .left.0, .left.1, .right.0, .right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
    #[error("degenerate batch: train-mode batch norm needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Self::Shape { op, left, right }
    }
}
