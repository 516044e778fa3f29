#![allow(dead_code)]

use std::collections::BTreeMap;

use castmtl_core::model::{FeatureBatch, FeatureDims, ModelParams};
use castmtl_core::numerics::{Gradients, Matrix, NormMode, Tape};
use castmtl_core::training::{traced_loss, Batch, LossConfig};
use castmtl_core::{Source, Task};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// A batch with random features and labels; `sources` fixes each row's channel.
pub fn random_batch(rng: &mut ChaCha8Rng, dims: &FeatureDims, sources: &[Source]) -> Batch {
    let n = sources.len();
    let features = FeatureBatch {
        user: random_matrix(rng, n, dims.user),
        content: random_matrix(rng, n, dims.content),
        context: random_matrix(rng, n, dims.context),
        creative: random_matrix(rng, n, dims.creative),
    };
    let mut labels = BTreeMap::new();
    let mut present = BTreeMap::new();
    for t in Task::ALL {
        labels.insert(t, (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect());
        present.insert(t, (0..n).map(|_| rng.random_bool(0.9)).collect());
    }
    Batch {
        features,
        sources: sources.to_vec(),
        labels,
        present,
    }
}

pub fn mixed_sources(rng: &mut ChaCha8Rng, n: usize) -> Vec<Source> {
    let mut s: Vec<Source> = (0..n)
        .map(|_| if rng.random_bool(0.5) { Source::Promotion } else { Source::Ad })
        .collect();
    // keep both channels present
    s[0] = Source::Promotion;
    s[n - 1] = Source::Ad;
    s
}

/// Loss value, gradients and ReLU activity pattern at `params`.
pub fn loss_and_grads(params: &ModelParams, batch: &Batch, cfg: &LossConfig) -> (f64, Gradients, Vec<bool>) {
    let mut tape = Tape::new();
    let traced = params.trace(&mut tape, &batch.features, NormMode::Train).unwrap();
    let (loss, breakdown) = traced_loss(&mut tape, &traced, batch, cfg).unwrap();
    let grads = tape.backward(loss, &Matrix::scalar(1.0)).unwrap();
    (breakdown.total, grads, tape.relu_pattern())
}

fn loss_only(params: &ModelParams, batch: &Batch, cfg: &LossConfig) -> (f64, Vec<bool>) {
    let mut tape = Tape::new();
    let traced = params.trace(&mut tape, &batch.features, NormMode::Train).unwrap();
    let (loss, _) = traced_loss(&mut tape, &traced, batch, cfg).unwrap();
    (tape.value(loss).get(0, 0), tape.relu_pattern())
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose ±h probe changed some ReLU's active set; the loss is not smooth there.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: (usize, f64, f64),
}

/// Relative-error denominator floor: below this scale both gradients count as zero.
pub const REL_FLOOR: f64 = 1e-5;

/// Central differences with step `h` on every learnable coordinate.
pub fn finite_difference_check(params: &ModelParams, batch: &Batch, cfg: &LossConfig, h: f64) -> GradCheck {
    let (_, grads, pattern) = loss_and_grads(params, batch, cfg);
    let mut p = params.clone();
    let names: Vec<String> = p.trainable().into_iter().map(|(n, _)| n).collect();
    let mut out = GradCheck::default();
    for name in names {
        let len = p.trainable().into_iter().find(|(n, _)| *n == name).unwrap().1.data().len();
        for k in 0..len {
            let set = |p: &mut ModelParams, delta: Option<f64>, orig: f64| {
                let mut blocks = p.trainable_mut();
                let (_, m) = blocks.iter_mut().find(|(n, _)| *n == name).unwrap();
                m.data_mut()[k] = delta.map_or(orig, |d| orig + d);
            };
            let orig = p.trainable().into_iter().find(|(n, _)| *n == name).unwrap().1.data()[k];
            set(&mut p, Some(h), orig);
            let (up, pat_up) = loss_only(&p, batch, cfg);
            set(&mut p, Some(-h), orig);
            let (down, pat_down) = loss_only(&p, batch, cfg);
            set(&mut p, None, orig);
            if pat_up != pattern || pat_down != pattern {
                out.skipped_kinks += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(&name).unwrap().data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(REL_FLOOR);
            out.checked += 1;
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = (k, fd, an);
            }
        }
    }
    out
}
