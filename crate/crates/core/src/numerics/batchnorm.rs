use serde::{Deserialize, Serialize};

use super::{Matrix, NumericsError};

/// Variance floor added before the square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the old running statistics at each update.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Train,
    Infer,
}

/// Per-column mean and biased variance of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn of(x: &Matrix) -> Result<Self, NumericsError> {
        let n = x.rows();
        if n < 2 {
            return Err(NumericsError::DegenerateBatch { rows: n });
        }
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let c = v - m;
                *s += c * c;
            }
        }
        for s in &mut var {
            *s /= n as f64;
        }
        Ok(Self { mean, var })
    }
}

/// Standardizes columns: returns `(x - mean) / sqrt(var + eps)` and the per-column `1/sqrt(var + eps)`.
pub fn standardize(x: &Matrix, mean: &[f64], var: &[f64], eps: f64) -> (Matrix, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    for r in 0..x.rows() {
        for ((o, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(&inv_std) {
            *o = (*o - m) * s;
        }
    }
    (out, inv_std)
}

/// Applies `gamma * xhat + beta` column-wise.
pub fn scale_shift(xhat: &Matrix, gamma: &Matrix, beta: &Matrix) -> Result<Matrix, NumericsError> {
    if gamma.shape() != (1, xhat.cols()) || beta.shape() != (1, xhat.cols()) {
        return Err(NumericsError::shape("batchnorm", xhat.shape(), gamma.shape()));
    }
    let mut out = xhat.clone();
    for r in 0..out.rows() {
        for ((o, g), b) in out.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * g + b;
        }
    }
    Ok(out)
}

/// Batch normalization layer with learnable scale/shift and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            running_mean: Matrix::zeros(1, width),
            running_var: Matrix::filled(1, width, 1.0),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }

    /// Forward pass. Train mode normalizes by batch statistics and folds them into the running
    /// statistics; infer mode uses the running statistics only.
    pub fn forward(&mut self, x: &Matrix, mode: NormMode) -> Result<Matrix, NumericsError> {
        if x.cols() != self.width() {
            return Err(NumericsError::shape("batchnorm", x.shape(), self.gamma.shape()));
        }
        match mode {
            NormMode::Train => {
                let stats = BatchStats::of(x)?;
                let (xhat, _) = standardize(x, &stats.mean, &stats.var, BN_EPSILON);
                self.update_running(&stats);
                scale_shift(&xhat, &self.gamma, &self.beta)
            }
            NormMode::Infer => self.infer(x),
        }
    }

    pub fn infer(&self, x: &Matrix) -> Result<Matrix, NumericsError> {
        if x.cols() != self.width() {
            return Err(NumericsError::shape("batchnorm", x.shape(), self.gamma.shape()));
        }
        let (xhat, _) = standardize(
            x,
            self.running_mean.data(),
            self.running_var.data(),
            BN_EPSILON,
        );
        scale_shift(&xhat, &self.gamma, &self.beta)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}
