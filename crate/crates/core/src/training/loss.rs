use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LossConfig, TrainError};
use crate::dataio::ImpressionTable;
use crate::model::{FeatureBatch, Source, Task, Traced};
use crate::numerics::{bce_with_logit, Tape, Var};

/// A mini-batch: features, per-task labels and presence flags, and the source of every row.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: FeatureBatch,
    pub sources: Vec<Source>,
    pub labels: BTreeMap<Task, Vec<f64>>,
    pub present: BTreeMap<Task, Vec<bool>>,
}

impl Batch {
    pub fn from_table(table: &ImpressionTable, rows: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect();
        Self {
            features: table.features.gather(rows),
            sources: rows.iter().map(|&i| table.sources[i]).collect(),
            labels: table.labels.iter().map(|(t, v)| (*t, pick(v))).collect(),
            present: table
                .present
                .iter()
                .map(|(t, v)| (*t, rows.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Whether row `i` contributes loss to task `t`.
    pub fn contributes(&self, cfg: &LossConfig, t: Task, i: usize) -> bool {
        self.present.get(&t).is_some_and(|p| p[i]) && cfg.contributes(self.sources[i], t)
    }

    fn label(&self, t: Task, i: usize) -> f64 {
        self.labels.get(&t).map_or(0.0, |l| l[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    /// Mean BCE over contributing rows, before the task weight.
    pub mean: f64,
    pub rows: usize,
    pub weight: f64,
}

impl TaskLoss {
    pub fn weighted(&self) -> f64 {
        self.weight * self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_task: BTreeMap<Task, TaskLoss>,
    /// Tasks that had no contributing rows in this batch.
    pub empty_tasks: Vec<Task>,
}

/// Per-row weights `λ_t / n_t` on contributing rows, zero elsewhere.
fn row_weights(batch: &Batch, cfg: &LossConfig, t: Task) -> (Vec<f64>, usize) {
    let on: Vec<bool> = (0..batch.len()).map(|i| batch.contributes(cfg, t, i)).collect();
    let n = on.iter().filter(|b| **b).count();
    let w = if n == 0 { 0.0 } else { cfg.weights[&t] / n as f64 };
    (on.iter().map(|&b| if b { w } else { 0.0 }).collect(), n)
}

fn finish(per_task: BTreeMap<Task, TaskLoss>, total: f64) -> Result<LossBreakdown, TrainError> {
    let empty_tasks: Vec<Task> = per_task
        .iter()
        .filter(|(_, l)| l.rows == 0)
        .map(|(t, _)| *t)
        .collect();
    if empty_tasks.len() == per_task.len() {
        return Err(TrainError::EmptyLoss);
    }
    Ok(LossBreakdown {
        total,
        per_task,
        empty_tasks,
    })
}

/// `L = Σ_t λ_t · mean_{contributing rows} BCE(y_t, σ(z_t))`.
pub fn masked_loss(
    logits: &BTreeMap<Task, Vec<f64>>,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<LossBreakdown, TrainError> {
    let mut per_task = BTreeMap::new();
    let mut total = 0.0;
    for t in cfg.tasks() {
        let z = logits.get(&t).ok_or(TrainError::MissingTask(t))?;
        if z.len() != batch.len() {
            return Err(TrainError::Config(format!(
                "{t} has {} logits for {} rows",
                z.len(),
                batch.len()
            )));
        }
        let loss = TaskLoss {
            mean: mean_bce(z, batch, cfg, t),
            rows: (0..batch.len()).filter(|&i| batch.contributes(cfg, t, i)).count(),
            weight: cfg.weights[&t],
        };
        total += loss.weighted();
        per_task.insert(t, loss);
    }
    finish(per_task, total)
}

/// The same objective recorded on `tape`; returns the scalar loss node.
pub fn traced_loss(
    tape: &mut Tape,
    traced: &Traced,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown), TrainError> {
    let mut per_task = BTreeMap::new();
    let mut total: Option<Var> = None;
    for t in cfg.tasks() {
        let z = *traced.logits.get(&t).ok_or(TrainError::MissingTask(t))?;
        let (weights, n) = row_weights(batch, cfg, t);
        let targets: Vec<f64> = (0..batch.len()).map(|i| batch.label(t, i)).collect();
        let node = tape.weighted_bce(z, targets, weights)?;
        per_task.insert(
            t,
            TaskLoss {
                mean: mean_bce(tape.value(z).data(), batch, cfg, t),
                rows: n,
                weight: cfg.weights[&t],
            },
        );
        if n > 0 {
            total = Some(match total {
                None => node,
                Some(acc) => tape.add(acc, node)?,
            });
        }
    }
    let total_value = total.map_or(0.0, |v| tape.value(v).get(0, 0));
    let breakdown = finish(per_task, total_value)?;
    let node = match total {
        Some(v) => v,
        None => tape.constant(crate::numerics::Matrix::scalar(0.0)),
    };
    Ok((node, breakdown))
}

fn mean_bce(z: &[f64], batch: &Batch, cfg: &LossConfig, t: Task) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &zi) in z.iter().enumerate() {
        if batch.contributes(cfg, t, i) {
            sum += bce_with_logit(batch.label(t, i), zi);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskSpec;
    use crate::numerics::Matrix;

    fn one_row_batch(source: Source, y: f64) -> Batch {
        let z = |c| Matrix::zeros(1, c);
        Batch {
            features: FeatureBatch {
                user: z(1),
                content: z(1),
                context: z(1),
                creative: z(1),
            },
            sources: vec![source],
            labels: Task::ALL.iter().map(|&t| (t, vec![y])).collect(),
            present: Task::ALL.iter().map(|&t| (t, vec![true])).collect(),
        }
    }

    fn zero_logits(n: usize) -> BTreeMap<Task, Vec<f64>> {
        Task::ALL.iter().map(|&t| (t, vec![0.0; n])).collect()
    }

    #[test]
    fn single_promo_row_costs_ln2_per_task() {
        let cfg = LossConfig::from_spec(&TaskSpec::five_task());
        let l = masked_loss(&zero_logits(1), &one_row_batch(Source::Promotion, 1.0), &cfg).unwrap();
        for t in Task::ALL {
            assert!((l.per_task[&t].mean - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!((l.total - 5.0 * std::f64::consts::LN_2).abs() < 1e-14);
        assert!(l.empty_tasks.is_empty());
    }

    #[test]
    fn single_ad_row_only_reaches_ad_tasks() {
        let cfg = LossConfig::from_spec(&TaskSpec::five_task());
        let l = masked_loss(&zero_logits(1), &one_row_batch(Source::Ad, 1.0), &cfg).unwrap();
        for t in [Task::PromotionStream, Task::Like, Task::Follow] {
            assert_eq!(l.per_task[&t].weighted(), 0.0);
            assert_eq!(l.per_task[&t].rows, 0);
        }
        assert_eq!(l.per_task[&Task::AdStream].rows, 1);
        assert_eq!(l.per_task[&Task::Click].rows, 1);
        assert_eq!(
            l.empty_tasks,
            vec![Task::PromotionStream, Task::Like, Task::Follow]
        );
        assert!((l.total - 2.0 * std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn nothing_contributing_is_an_error() {
        let spec = TaskSpec::five_task();
        let cfg = LossConfig {
            mask: super::super::MaskPolicy::uniform(&spec, false),
            ..LossConfig::from_spec(&spec)
        };
        let r = masked_loss(&zero_logits(1), &one_row_batch(Source::Promotion, 0.0), &cfg);
        assert!(matches!(r, Err(TrainError::EmptyLoss)));
    }

    #[test]
    fn missing_logits_are_reported() {
        let cfg = LossConfig::from_spec(&TaskSpec::five_task());
        let mut z = zero_logits(1);
        z.remove(&Task::Follow);
        let r = masked_loss(&z, &one_row_batch(Source::Promotion, 0.0), &cfg);
        assert!(matches!(r, Err(TrainError::MissingTask(Task::Follow))));
    }
}
