use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{tier_gain, AblationResult, ExperimentError, ReplayResult, SegmentDelta};
use crate::evaluation::{default_segments, render_segments, Segment};

fn signed(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:+.1}%"))
}

fn mean_sd(s: Option<super::Summary>) -> String {
    s.map_or_else(|| "-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.sd))
}

/// Relative-change block for the non-baseline arms, then absolute APs for every arm.
pub fn render_ablation(r: &AblationResult) -> Result<String, ExperimentError> {
    if r.arms.is_empty() || r.seeds.is_empty() {
        return Err(ExperimentError::EmptyResults);
    }
    let mut out = String::new();
    let _ = writeln!(out, "Relative change to `{}` (mean over {} seeds)", r.baseline, r.seeds.len());
    let _ = writeln!(out, "{:<28} {:>14} {:>10}", "configuration", "Promotions AP", "Ads AP");
    for a in r.arms.iter().filter(|a| a.name != r.baseline) {
        let _ = writeln!(out, "{:<28} {:>14} {:>10}", a.name, signed(a.promotions_rel), signed(a.ads_rel));
    }
    out.push('\n');
    let _ = writeln!(out, "{:<28} {:>20} {:>20} {:>7}", "arm", "Promotions AP", "Ads AP", "failed");
    for a in &r.arms {
        let _ = writeln!(
            out,
            "{:<28} {:>20} {:>20} {:>7}",
            a.name,
            mean_sd(a.promotions_ap),
            mean_sd(a.ads_ap),
            a.failed_seeds.len()
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTableRow {
    pub segment: Segment,
    pub i2s: Option<f64>,
    pub ecps: Option<f64>,
    pub ctr: Option<f64>,
    pub streams: Option<f64>,
}

impl From<&SegmentDelta> for ReplayTableRow {
    fn from(d: &SegmentDelta) -> Self {
        Self {
            segment: d.segment,
            i2s: d.i2s,
            ecps: d.ecps,
            ctr: d.ctr,
            streams: d.streams,
        }
    }
}

fn delta_rows(r: &ReplayResult, segments: &[Segment]) -> Vec<ReplayTableRow> {
    segments
        .iter()
        .filter_map(|s| r.deltas.iter().find(|d| d.segment == *s).map(ReplayTableRow::from))
        .collect()
}

fn render_delta_rows(out: &mut String, rows: &[ReplayTableRow]) {
    let _ = writeln!(out, "{:<14} {:>9} {:>9} {:>9} {:>9}", "segment", "i2s", "eCPS", "CTR", "streams");
    for row in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>9} {:>9} {:>9}",
            row.segment.to_string(),
            signed(row.i2s),
            signed(row.ecps),
            signed(row.ctr),
            signed(row.streams)
        );
    }
}

/// Segment deltas, tier deltas, then each arm's absolute metrics.
pub fn render_replay(results: &[ReplayResult]) -> Result<String, ExperimentError> {
    if results.is_empty() {
        return Err(ExperimentError::EmptyResults);
    }
    let mut out = String::new();
    for r in results {
        let _ = writeln!(
            out,
            "{} vs {} (seed {}, {} opportunities, stream {})",
            r.candidate.name,
            r.baseline.name,
            r.config.seed,
            r.config.n_opportunities,
            &r.baseline.checksum[..12]
        );
        render_delta_rows(&mut out, &delta_rows(r, &[Segment::All, Segment::LessStreamed]));
        out.push('\n');
        render_delta_rows(&mut out, &delta_rows(r, &(0..6).map(Segment::Tier).collect::<Vec<_>>()));
        for arm in [&r.baseline, &r.candidate] {
            let _ = writeln!(out, "\n[{}]", arm.name);
            out.push_str(&render_segments(&arm.segments, &default_segments()));
        }
        out.push('\n');
    }
    let _ = writeln!(out, "mean i2s change by tier group");
    let _ = writeln!(out, "{:<8} {:>11} {:>11}", "seed", "tiers 0-2", "tiers 3-5");
    let mut wins = 0;
    for r in results {
        let (lo, hi) = (tier_gain(r, 0..3), tier_gain(r, 3..6));
        if let (Some(l), Some(h)) = (lo, hi) {
            wins += usize::from(h > l);
        }
        let _ = writeln!(out, "{:<8} {:>11} {:>11}", r.config.seed, signed(lo), signed(hi));
    }
    let _ = writeln!(out, "tiers 3-5 ahead in {wins}/{} seeds", results.len());
    Ok(out)
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn emit(dir: &Path, stem: &str, json: String, text: String) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let j = dir.join(format!("{stem}.json"));
    let t = dir.join(format!("{stem}.txt"));
    write(&j, &json)?;
    write(&t, &text)?;
    Ok(vec![j, t])
}

/// Writes `ablation.json` and `ablation.txt` under `dir`.
pub fn emit_ablation_report(r: &AblationResult, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let text = render_ablation(r)?;
    let json = serde_json::to_string_pretty(r).expect("ablation result serializes");
    emit(dir, "ablation", json, text)
}

/// Writes `replay.json` and `replay.txt` under `dir`.
pub fn emit_replay_report(results: &[ReplayResult], dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let text = render_replay(results)?;
    let json = serde_json::to_string_pretty(results).expect("replay result serializes");
    emit(dir, "replay", json, text)
}
