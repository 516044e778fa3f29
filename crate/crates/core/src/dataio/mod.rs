//! Impression records, the synthetic world and log generator, temporal splits and file IO.

mod io;
mod split;
mod world;

pub use io::{
    read_catalog, read_impressions, write_catalog, write_impressions, CatalogRow,
};
pub use split::{SplitSpec, Splits};
pub use world::{
    Context, Creative, Exposure, LogConfig, OutcomeParams, OutcomeProbs, Show, ShowCatalog, User,
    World, WorldConfig, AD_FORMATS, LESS_STREAMED_THRESHOLD, N_FORMATS, N_GENRES, N_SLOTS,
    N_SURFACES, N_TIERS, N_TIME_BUCKETS, PROMO_FORMATS,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{FeatureBatch, FeatureDims, Source, Task};
use crate::numerics::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: unknown task label keys {keys:?}")]
    UnknownTasks { line: usize, keys: Vec<String> },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("inconsistent feature widths: {0}")]
    FeatureWidth(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One logged exposure with its outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub id: u64,
    /// Epoch seconds.
    pub ts: i64,
    pub source: Source,
    pub user_id: u32,
    pub show_id: u32,
    pub f_user: Vec<f64>,
    pub f_content: Vec<f64>,
    pub f_context: Vec<f64>,
    pub f_creative: Vec<f64>,
    pub labels: BTreeMap<Task, u8>,
    pub label_present: BTreeMap<Task, bool>,
    /// Currency units; always 0 for promotions.
    pub cost: f64,
}

impl ImpressionRecord {
    /// The label if it is present, otherwise `None`.
    pub fn label(&self, t: Task) -> Option<u8> {
        if self.label_present.get(&t).copied().unwrap_or(false) {
            self.labels.get(&t).copied()
        } else {
            None
        }
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            user: self.f_user.len(),
            content: self.f_content.len(),
            context: self.f_context.len(),
            creative: self.f_creative.len(),
        }
    }
}

/// Columnar view of a set of impressions, ready for batching.
#[derive(Debug, Clone)]
pub struct ImpressionTable {
    pub features: FeatureBatch,
    pub sources: Vec<Source>,
    pub show_ids: Vec<u32>,
    pub labels: BTreeMap<Task, Vec<f64>>,
    pub present: BTreeMap<Task, Vec<bool>>,
}

impl ImpressionTable {
    pub fn from_records(records: &[ImpressionRecord]) -> Result<Self, DataError> {
        let dims = records.first().map(ImpressionRecord::dims).unwrap_or(FeatureDims {
            user: 0,
            content: 0,
            context: 0,
            creative: 0,
        });
        let n = records.len();
        let mut user = Vec::with_capacity(n * dims.user);
        let mut content = Vec::with_capacity(n * dims.content);
        let mut context = Vec::with_capacity(n * dims.context);
        let mut creative = Vec::with_capacity(n * dims.creative);
        let mut labels: BTreeMap<Task, Vec<f64>> =
            Task::ALL.iter().map(|&t| (t, Vec::with_capacity(n))).collect();
        let mut present: BTreeMap<Task, Vec<bool>> =
            Task::ALL.iter().map(|&t| (t, Vec::with_capacity(n))).collect();
        for (i, r) in records.iter().enumerate() {
            if r.dims() != dims {
                return Err(DataError::FeatureWidth(format!(
                    "record {i} (id {}) has widths {:?}, expected {:?}",
                    r.id,
                    r.dims(),
                    dims
                )));
            }
            user.extend_from_slice(&r.f_user);
            content.extend_from_slice(&r.f_content);
            context.extend_from_slice(&r.f_context);
            creative.extend_from_slice(&r.f_creative);
            for t in Task::ALL {
                let lab = r.label(t);
                labels.get_mut(&t).expect("all tasks").push(f64::from(lab.unwrap_or(0)));
                present.get_mut(&t).expect("all tasks").push(lab.is_some());
            }
        }
        let mk = |c: usize, v: Vec<f64>| Matrix::from_vec(n, c, v).expect("widths checked");
        Ok(Self {
            features: FeatureBatch {
                user: mk(dims.user, user),
                content: mk(dims.content, content),
                context: mk(dims.context, context),
                creative: mk(dims.creative, creative),
            },
            sources: records.iter().map(|r| r.source).collect(),
            show_ids: records.iter().map(|r| r.show_id).collect(),
            labels,
            present,
        })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims {
            user: self.features.user.cols(),
            content: self.features.content.cols(),
            context: self.features.context.cols(),
            creative: self.features.creative.cols(),
        }
    }

    /// The given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let pick_f = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect();
        let pick_b = |v: &Vec<bool>| rows.iter().map(|&i| v[i]).collect();
        Self {
            features: self.features.gather(rows),
            sources: rows.iter().map(|&i| self.sources[i]).collect(),
            show_ids: rows.iter().map(|&i| self.show_ids[i]).collect(),
            labels: self.labels.iter().map(|(t, v)| (*t, pick_f(v))).collect(),
            present: self.present.iter().map(|(t, v)| (*t, pick_b(v))).collect(),
        }
    }

    /// Row indices drawn from `source`, in table order.
    pub fn indices_of(&self, source: Source) -> Vec<usize> {
        self.sources
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == source)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, source: Source) -> usize {
        self.sources.iter().filter(|s| **s == source).count()
    }
}
