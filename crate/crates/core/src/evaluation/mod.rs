//! Average precision, online-style delivery metrics and segment reports.

mod ap;
mod online;

pub use ap::{
    average_precision, average_precision_interpolated, average_precision_tie_averaged,
    average_precision_with, relative_change, roc_auc, ApVariant,
};
pub use online::{
    default_segments, online_metrics, render_segments, to_micros, Counts, MetricsReport,
    OnlineMetrics, ReportMetadata, Segment, SegmentMetrics, ServedImpression, MICROS_PER_UNIT,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::ImpressionTable;
use crate::model::{ModelError, ModelParams, Source, Task, TaskSpec};
use crate::training::LossConfig;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("average precision is undefined without positive labels")]
    NoPositives,
    #[error("AUC is undefined without negative labels")]
    NoNegatives,
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("label at index {0} is not 0 or 1")]
    Label(usize),
    #[error("relative change needs a positive baseline, got {0}")]
    Baseline(f64),
    #[error("show ids missing from the catalog: {0:?}")]
    UnknownShows(Vec<u32>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// AP summary for one task. Absent values mean the metric is undefined on these rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAp {
    pub ap: Option<f64>,
    pub ap_tie_averaged: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_interpolated: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub rows: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Score every task on every source that has its label, not only the task's home channels.
    pub foreign_sources: bool,
    pub interpolated: bool,
    pub auc: bool,
}

/// Scores and labels per task, restricted to the task's evaluation rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedPredictions {
    pub tasks: BTreeMap<Task, (Vec<f64>, Vec<u8>)>,
}

/// Rows on which task `t` is evaluated. By default these are the task's home channels,
/// further restricted by the training mask and label availability.
pub fn eval_rows(table: &ImpressionTable, spec: &TaskSpec, loss: &LossConfig, t: Task, opts: EvalOptions) -> Vec<usize> {
    let home = spec.home_sources(t);
    let present = &table.present[&t];
    (0..table.len())
        .filter(|&i| {
            let s = table.sources[i];
            present[i]
                && loss.labels.available(s, t)
                && (opts.foreign_sources || (home.contains(&s) && loss.mask.allows(s, t)))
        })
        .collect()
}

/// Rows of `source` carrying a label for `t`.
pub fn source_rows(table: &ImpressionTable, source: Source, t: Task) -> Vec<usize> {
    let present = &table.present[&t];
    (0..table.len())
        .filter(|&i| table.sources[i] == source && present[i])
        .collect()
}

/// Predictions of every head for every row, computed in fixed-size chunks.
pub fn score_table(params: &ModelParams, table: &ImpressionTable) -> Result<BTreeMap<Task, Vec<f64>>, EvalError> {
    const CHUNK: usize = 8192;
    let mut out: BTreeMap<Task, Vec<f64>> = params
        .tasks()
        .iter()
        .map(|&t| (t, Vec::with_capacity(table.len())))
        .collect();
    let mut start = 0;
    while start < table.len() {
        let end = (start + CHUNK).min(table.len());
        let idx: Vec<usize> = (start..end).collect();
        for (t, p) in params.predict_all(&table.features.gather(&idx))? {
            out.get_mut(&t).expect("model task").extend(p);
        }
        start = end;
    }
    Ok(out)
}

pub fn ranked_predictions(
    scores: &BTreeMap<Task, Vec<f64>>,
    table: &ImpressionTable,
    spec: &TaskSpec,
    loss: &LossConfig,
    opts: EvalOptions,
) -> RankedPredictions {
    let mut tasks = BTreeMap::new();
    for (&t, s) in scores {
        if !spec.contains(t) {
            continue;
        }
        let rows = eval_rows(table, spec, loss, t, opts);
        let labels = &table.labels[&t];
        tasks.insert(
            t,
            (
                rows.iter().map(|&i| s[i]).collect(),
                rows.iter().map(|&i| labels[i] as u8).collect(),
            ),
        );
    }
    RankedPredictions { tasks }
}

pub fn task_ap(scores: &[f64], labels: &[u8], opts: EvalOptions) -> TaskAp {
    TaskAp {
        ap: average_precision(scores, labels).ok(),
        ap_tie_averaged: average_precision_tie_averaged(scores, labels).ok(),
        ap_interpolated: if opts.interpolated {
            average_precision_interpolated(scores, labels).ok()
        } else {
            None
        },
        auc: if opts.auc { roc_auc(scores, labels).ok() } else { None },
        rows: scores.len(),
        positives: labels.iter().filter(|&&y| y == 1).count(),
    }
}

pub fn ap_by_task(ranked: &RankedPredictions, opts: EvalOptions) -> BTreeMap<Task, TaskAp> {
    ranked
        .tasks
        .iter()
        .map(|(t, (s, y))| (*t, task_ap(s, y, opts)))
        .collect()
}

/// Mean AP over the stream tasks that have a defined AP; `None` if there are none.
pub fn stream_selection_score(aps: &BTreeMap<Task, TaskAp>) -> Option<f64> {
    let v: Vec<f64> = aps
        .iter()
        .filter(|(t, _)| t.is_stream())
        .filter_map(|(_, a)| a.ap)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
