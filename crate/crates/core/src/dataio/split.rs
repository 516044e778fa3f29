use serde::{Deserialize, Serialize};

use super::{DataError, ImpressionRecord};

/// Temporal boundaries. Train is `ts < train_end`, validation `train_end <= ts < val_end`,
/// test `ts >= val_end`: a record exactly on a boundary goes to the later split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: i64,
    pub val_end: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<ImpressionRecord>,
    pub val: Vec<ImpressionRecord>,
    pub test: Vec<ImpressionRecord>,
}

impl SplitSpec {
    /// Boundaries at the given fractions of `[start, start + span)`.
    pub fn at_fractions(start: i64, span: i64, train_frac: f64, val_frac: f64) -> Result<Self, DataError> {
        if !(0.0 < train_frac && train_frac < val_frac && val_frac < 1.0) {
            return Err(DataError::Config(format!(
                "split fractions must satisfy 0 < train ({train_frac}) < val ({val_frac}) < 1"
            )));
        }
        Ok(Self {
            train_end: start + (span as f64 * train_frac).round() as i64,
            val_end: start + (span as f64 * val_frac).round() as i64,
        })
    }

    pub fn apply(&self, records: &[ImpressionRecord]) -> Result<Splits, DataError> {
        if self.train_end > self.val_end {
            return Err(DataError::Config("train_end must not exceed val_end".into()));
        }
        let mut s = Splits {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for r in records {
            if r.ts < self.train_end {
                s.train.push(r.clone());
            } else if r.ts < self.val_end {
                s.val.push(r.clone());
            } else {
                s.test.push(r.clone());
            }
        }
        for (name, part) in [("train", &s.train), ("validation", &s.val), ("test", &s.test)] {
            if part.is_empty() {
                return Err(DataError::EmptySplit(name));
            }
        }
        Ok(s)
    }
}
