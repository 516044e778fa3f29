use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{traced_loss, Batch};
use super::sampler::{pooled_batches, BalancedSampler};
use super::{adam_step, AdamConfig, AdamState, LossConfig, TrainError};
use crate::dataio::ImpressionTable;
use crate::evaluation::{ap_by_task, ranked_predictions, score_table, stream_selection_score, EvalOptions};
use crate::model::{ModelConfig, ModelParams, Source, Task, TaskSpec};
use crate::numerics::{Matrix, NormMode, Tape};

/// Which impressions feed training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    #[default]
    Both,
    PromotionOnly,
    AdOnly,
}

impl SourceMode {
    pub fn includes(self, s: Source) -> bool {
        match self {
            SourceMode::Both => true,
            SourceMode::PromotionOnly => s == Source::Promotion,
            SourceMode::AdOnly => s == Source::Ad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub sources: SourceMode,
    /// Source-balanced batches; only meaningful when both sources are used.
    #[serde(default = "yes")]
    pub balanced: bool,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Caps the number of batches in an epoch.
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        Self {
            model,
            batch_size: 256,
            epochs: 3,
            sources: SourceMode::Both,
            balanced: true,
            optimizer: AdamConfig::default(),
            seed,
            max_batches_per_epoch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean unweighted per-task loss over batches where the task had rows.
    pub task_loss: BTreeMap<Task, f64>,
    pub val_ap: BTreeMap<Task, Option<f64>>,
    pub selection_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation score.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Seeds for initialization and batching, both derived from the run seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

enum Batches {
    Balanced(BalancedSampler),
    Pooled { rows: Vec<usize>, rng: ChaCha8Rng },
}

impl Batches {
    fn epoch(&mut self, batch_size: usize) -> Result<Vec<Vec<usize>>, TrainError> {
        match self {
            Batches::Balanced(s) => {
                let n = s.batches_per_epoch();
                Ok((0..n).map(|_| s.next_batch()).collect())
            }
            Batches::Pooled { rows, rng } => pooled_batches(rows, batch_size, rng),
        }
    }
}

fn check_tasks(cfg: &TrainConfig, spec: &TaskSpec, loss: &LossConfig) -> Result<(), TrainError> {
    if cfg.model.tasks != spec.tasks() {
        return Err(TrainError::Config(format!(
            "model tasks {:?} differ from task spec {:?}",
            cfg.model.tasks,
            spec.tasks()
        )));
    }
    for t in spec.tasks() {
        if !loss.weights.contains_key(t) {
            return Err(TrainError::Config(format!("no loss weight for {t}")));
        }
    }
    if let Some(t) = loss.weights.keys().find(|t| !spec.contains(**t)) {
        return Err(TrainError::Config(format!("loss weight for {t}, which has no tower")));
    }
    if loss.weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(TrainError::Config("loss weights must be non-negative".into()));
    }
    Ok(())
}

/// Trains from a seeded initialization and returns the best-validation checkpoint.
pub fn train(
    cfg: &TrainConfig,
    spec: &TaskSpec,
    loss: &LossConfig,
    train_rows: &ImpressionTable,
    val_rows: &ImpressionTable,
) -> Result<TrainOutcome, TrainError> {
    let init = ModelParams::init(&cfg.model, sub_seed(cfg.seed, 1))?;
    train_from(init, cfg, spec, loss, train_rows, val_rows)
}

pub fn train_from(
    mut params: ModelParams,
    cfg: &TrainConfig,
    spec: &TaskSpec,
    loss: &LossConfig,
    train_rows: &ImpressionTable,
    val_rows: &ImpressionTable,
) -> Result<TrainOutcome, TrainError> {
    check_tasks(cfg, spec, loss)?;
    cfg.optimizer.validate()?;
    if cfg.epochs == 0 {
        return Err(TrainError::Config("epochs must be positive".into()));
    }
    if val_rows.is_empty() {
        return Err(TrainError::Config("validation split is empty".into()));
    }
    let promo: Vec<usize> = if cfg.sources.includes(Source::Promotion) {
        train_rows.indices_of(Source::Promotion)
    } else {
        Vec::new()
    };
    let ad: Vec<usize> = if cfg.sources.includes(Source::Ad) {
        train_rows.indices_of(Source::Ad)
    } else {
        Vec::new()
    };
    let batch_seed = sub_seed(cfg.seed, 2);
    let mut batches = if cfg.sources == SourceMode::Both && cfg.balanced {
        Batches::Balanced(BalancedSampler::new(promo, ad, cfg.batch_size, batch_seed)?)
    } else {
        let mut rows = promo;
        rows.extend(ad);
        rows.sort_unstable();
        if rows.is_empty() {
            let s = if cfg.sources == SourceMode::AdOnly {
                Source::Ad
            } else {
                Source::Promotion
            };
            return Err(TrainError::EmptyPool(s));
        }
        Batches::Pooled {
            rows,
            rng: ChaCha8Rng::seed_from_u64(batch_seed),
        }
    };

    let mut state = AdamState::new(cfg.optimizer);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut plan = batches.epoch(cfg.batch_size)?;
        if let Some(cap) = cfg.max_batches_per_epoch {
            plan.truncate(cap);
        }
        let mut loss_sum = 0.0;
        let mut task_sums: BTreeMap<Task, (f64, usize)> = BTreeMap::new();
        for (bi, rows) in plan.iter().enumerate() {
            let batch = Batch::from_table(train_rows, rows);
            let mut tape = Tape::new();
            let traced = params.trace(&mut tape, &batch.features, NormMode::Train)?;
            let (total, breakdown) = traced_loss(&mut tape, &traced, &batch, loss)?;
            let diverged = |reason: String, current: &ModelParams| TrainError::Diverged {
                epoch,
                batch: bi,
                reason,
                last_good: Box::new(best.as_ref().map_or_else(|| current.clone(), |b| b.2.clone())),
            };
            if !breakdown.total.is_finite() {
                return Err(diverged(format!("loss is {}", breakdown.total), &params));
            }
            let grads = tape.backward(total, &Matrix::scalar(1.0))?;
            let before = best.is_none().then(|| params.clone());
            match adam_step(&mut params, &grads, &mut state) {
                Ok(()) => {}
                Err(e @ TrainError::NonFiniteGradient { .. }) => return Err(diverged(e.to_string(), &params)),
                Err(e) => return Err(e),
            }
            if let (Some(bn), Some(stats)) = (params.norm_mut(), traced.batch_stats.as_ref()) {
                bn.update_running(stats);
            }
            if !params.is_finite() {
                let fallback = before.as_ref().unwrap_or(&params);
                return Err(diverged("parameters became non-finite".into(), fallback));
            }
            loss_sum += breakdown.total;
            for (t, l) in &breakdown.per_task {
                if l.rows > 0 {
                    let e = task_sums.entry(*t).or_insert((0.0, 0));
                    e.0 += l.mean;
                    e.1 += 1;
                }
            }
        }
        let scores = score_table(&params, val_rows)?;
        let ranked = ranked_predictions(&scores, val_rows, spec, loss, EvalOptions::default());
        let aps = ap_by_task(&ranked, EvalOptions::default());
        let selection = stream_selection_score(&aps);
        log.push(EpochLog {
            epoch,
            batches: plan.len(),
            train_loss: loss_sum / plan.len().max(1) as f64,
            task_loss: task_sums.iter().map(|(t, (s, n))| (*t, s / *n as f64)).collect(),
            val_ap: aps.iter().map(|(t, a)| (*t, a.ap)).collect(),
            selection_score: selection,
        });
        let score = selection.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        log,
    })
}

/// One JSON object per epoch.
pub fn write_log(log: &[EpochLog], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in log {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}
