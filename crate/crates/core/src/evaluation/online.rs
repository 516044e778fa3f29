use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::{EvalError, TaskAp};
use crate::dataio::{CatalogRow, N_TIERS};
use crate::model::Task;

/// Spend is tracked in millionths of a currency unit so sums are exact.
pub const MICROS_PER_UNIT: f64 = 1e6;

pub fn to_micros(cost: f64) -> u64 {
    (cost * MICROS_PER_UNIT).round() as u64
}

/// One delivered impression and what happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServedImpression {
    pub show_id: u32,
    pub streamed: bool,
    pub clicked: bool,
    pub spend_micros: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    All,
    LessStreamed,
    Tier(u8),
}

impl std::fmt::Display for Segment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Segment::All => f.write_str("all"),
            Segment::LessStreamed => f.write_str("less-streamed"),
            Segment::Tier(t) => write!(f, "tier {t}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub impressions: u64,
    pub streams: u64,
    pub clicks: u64,
    pub spend_micros: u64,
}

impl Counts {
    fn add(&mut self, s: &ServedImpression) {
        self.impressions += 1;
        self.streams += u64::from(s.streamed);
        self.clicks += u64::from(s.clicked);
        self.spend_micros += s.spend_micros;
    }

    pub fn i2s(&self) -> Option<f64> {
        (self.impressions > 0).then(|| self.streams as f64 / self.impressions as f64)
    }

    pub fn ctr(&self) -> Option<f64> {
        (self.impressions > 0).then(|| self.clicks as f64 / self.impressions as f64)
    }

    /// Spend per stream as an exact fraction of micro-units; absent without streams.
    pub fn ecps_exact(&self) -> Option<Ratio<u64>> {
        (self.streams > 0).then(|| Ratio::new(self.spend_micros, self.streams))
    }

    /// Spend per stream in currency units; absent without streams.
    pub fn ecps(&self) -> Option<f64> {
        (self.streams > 0).then(|| self.spend_micros as f64 / MICROS_PER_UNIT / self.streams as f64)
    }

    pub fn spend(&self) -> f64 {
        self.spend_micros as f64 / MICROS_PER_UNIT
    }
}

/// Serialized view of one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub segment: Segment,
    pub impressions: u64,
    pub streams: u64,
    pub clicks: u64,
    pub spend: f64,
    pub spend_micros: u64,
    pub i2s: Option<f64>,
    pub ctr: Option<f64>,
    pub ecps: Option<f64>,
}

impl SegmentMetrics {
    pub fn new(segment: Segment, c: &Counts) -> Self {
        Self {
            segment,
            impressions: c.impressions,
            streams: c.streams,
            clicks: c.clicks,
            spend: c.spend(),
            spend_micros: c.spend_micros,
            i2s: c.i2s(),
            ctr: c.ctr(),
            ecps: c.ecps(),
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            impressions: self.impressions,
            streams: self.streams,
            clicks: self.clicks,
            spend_micros: self.spend_micros,
        }
    }
}

/// Aggregates for `all`, `less_streamed` and every tier.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineMetrics {
    pub segments: BTreeMap<Segment, Counts>,
}

impl OnlineMetrics {
    pub fn get(&self, s: Segment) -> Counts {
        self.segments.get(&s).copied().unwrap_or_default()
    }

    pub fn rows(&self) -> Vec<SegmentMetrics> {
        self.segments.iter().map(|(s, c)| SegmentMetrics::new(*s, c)).collect()
    }
}

pub fn online_metrics(served: &[ServedImpression], catalog: &[CatalogRow]) -> Result<OnlineMetrics, EvalError> {
    let by_id: BTreeMap<u32, &CatalogRow> = catalog.iter().map(|r| (r.show_id, r)).collect();
    let mut missing: Vec<u32> = served
        .iter()
        .map(|s| s.show_id)
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(EvalError::UnknownShows(missing));
    }
    let mut segments: BTreeMap<Segment, Counts> = BTreeMap::new();
    segments.insert(Segment::All, Counts::default());
    segments.insert(Segment::LessStreamed, Counts::default());
    for t in 0..N_TIERS as u8 {
        segments.insert(Segment::Tier(t), Counts::default());
    }
    for s in served {
        let row = by_id[&s.show_id];
        segments.get_mut(&Segment::All).expect("present").add(s);
        segments.entry(Segment::Tier(row.tier)).or_default().add(s);
        if row.less_streamed() {
            segments.get_mut(&Segment::LessStreamed).expect("present").add(s);
        }
    }
    Ok(OnlineMetrics { segments })
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model_id: String,
    pub dataset_id: String,
    pub seed: Option<u64>,
}

/// Offline AP per task plus online-style segment metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metadata: ReportMetadata,
    pub ap: BTreeMap<Task, TaskAp>,
    pub segments: Vec<SegmentMetrics>,
}

/// Segments shown in terminal tables by default.
pub fn default_segments() -> Vec<Segment> {
    let mut v = vec![Segment::All, Segment::LessStreamed];
    v.extend((0..6).map(Segment::Tier));
    v
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self, segments: &[Segment]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8} {:>10} {:>8}", "task", "AP", "AP(ties)", "rows");
        for (t, ap) in &self.ap {
            let _ = writeln!(
                out,
                "{:<16} {:>8} {:>10} {:>8}",
                t.name(),
                opt(ap.ap, 4),
                opt(ap.ap_tie_averaged, 4),
                ap.rows
            );
        }
        if !self.segments.is_empty() {
            out.push('\n');
            out.push_str(&render_segments(&self.segments, segments));
        }
        out
    }
}

pub fn render_segments(rows: &[SegmentMetrics], segments: &[Segment]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>11} {:>8} {:>8} {:>8} {:>10} {:>12}",
        "segment", "impressions", "streams", "i2s", "CTR", "eCPS", "spend"
    );
    for seg in segments {
        if let Some(r) = rows.iter().find(|r| r.segment == *seg) {
            let _ = writeln!(
                out,
                "{:<14} {:>11} {:>8} {:>8} {:>8} {:>10} {:>12.2}",
                seg.to_string(),
                r.impressions,
                r.streams,
                opt(r.i2s, 4),
                opt(r.ctr, 4),
                opt(r.ecps, 4),
                r.spend
            );
        }
    }
    out
}
