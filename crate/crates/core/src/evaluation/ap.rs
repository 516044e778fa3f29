use serde::{Deserialize, Serialize};

use super::EvalError;

/// How score ties and the precision-recall summary are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApVariant {
    /// Precision at each positive's rank; ties broken earlier-index-first.
    #[default]
    Stable,
    /// Expected stable AP when tied items are ordered uniformly at random.
    TieAveraged,
    /// Area under the interpolated precision-recall curve, stable tie order.
    Interpolated,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<usize, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(EvalError::Label(i));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    Ok(positives)
}

/// Indices by descending score, earlier index first among ties.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let positives = check(scores, labels)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

pub fn average_precision_tie_averaged(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let positives = check(scores, labels)?;
    let order = ranking(scores);
    let mut sum = 0.0;
    let (mut n_before, mut p_before) = (0usize, 0usize);
    let mut start = 0;
    while start < order.len() {
        let s = scores[order[start]];
        let mut end = start;
        while end < order.len() && scores[order[end]] == s {
            end += 1;
        }
        let m = end - start;
        let k = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        if k > 0 {
            // A group slot j is positive with probability k/m; given that, the other k-1
            // positives sit uniformly in the other m-1 slots.
            let share = k as f64 / m as f64;
            let others = if m > 1 {
                (k - 1) as f64 / (m - 1) as f64
            } else {
                0.0
            };
            for j in 1..=m {
                let expected_hits = p_before as f64 + 1.0 + (j - 1) as f64 * others;
                sum += share * expected_hits / (n_before + j) as f64;
            }
        }
        n_before += m;
        p_before += k;
        start = end;
    }
    Ok(sum / positives as f64)
}

pub fn average_precision_interpolated(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let positives = check(scores, labels)?;
    let order = ranking(scores);
    let mut precision_at_hits = Vec::with_capacity(positives);
    let mut hits = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            precision_at_hits.push(hits as f64 / (k + 1) as f64);
        }
    }
    let mut best: f64 = 0.0;
    let mut sum = 0.0;
    for p in precision_at_hits.iter().rev() {
        best = best.max(*p);
        sum += best;
    }
    Ok(sum / positives as f64)
}

pub fn average_precision_with(variant: ApVariant, scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    match variant {
        ApVariant::Stable => average_precision(scores, labels),
        ApVariant::TieAveraged => average_precision_tie_averaged(scores, labels),
        ApVariant::Interpolated => average_precision_interpolated(scores, labels),
    }
}

/// Area under the ROC curve with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let positives = check(scores, labels)?;
    let negatives = labels.len() - positives;
    if negatives == 0 {
        return Err(EvalError::NoNegatives);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let mid = (start + end + 1) as f64 / 2.0;
        rank_sum += mid * idx[start..end].iter().filter(|&&i| labels[i] == 1).count() as f64;
        start = end;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// `100 · (candidate − baseline) / baseline`.
pub fn relative_change(candidate: f64, baseline: f64) -> Result<f64, EvalError> {
    if !(baseline > 0.0) || !candidate.is_finite() || !baseline.is_finite() {
        return Err(EvalError::Baseline(baseline));
    }
    Ok(100.0 * (candidate - baseline) / baseline)
}
