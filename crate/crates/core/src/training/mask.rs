use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Source, Task, TaskSpec};

/// Binary source x task matrix deciding which impressions train which towers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPolicy {
    entries: BTreeMap<Source, BTreeMap<Task, bool>>,
}

impl MaskPolicy {
    /// Directional transfer: ad impressions never train promotion-only tasks; everything else
    /// is on.
    pub fn directional(spec: &TaskSpec) -> Self {
        let mut entries = BTreeMap::new();
        for s in Source::BOTH {
            let row = spec
                .tasks()
                .iter()
                .map(|&t| (t, !(s == Source::Ad && spec.is_promo_only(t))))
                .collect();
            entries.insert(s, row);
        }
        Self { entries }
    }

    pub fn all_on(spec: &TaskSpec) -> Self {
        Self::uniform(spec, true)
    }

    pub fn uniform(spec: &TaskSpec, on: bool) -> Self {
        let mut entries = BTreeMap::new();
        for s in Source::BOTH {
            entries.insert(s, spec.tasks().iter().map(|&t| (t, on)).collect());
        }
        Self { entries }
    }

    /// `m_{s,t}`; tasks the policy does not know about are off.
    pub fn allows(&self, s: Source, t: Task) -> bool {
        self.entries
            .get(&s)
            .and_then(|row| row.get(&t))
            .copied()
            .unwrap_or(false)
    }

    pub fn set(&mut self, s: Source, t: Task, on: bool) {
        self.entries.entry(s).or_default().insert(t, on);
    }

    pub fn with(mut self, s: Source, t: Task, on: bool) -> Self {
        self.set(s, t, on);
        self
    }

    pub fn entries(&self) -> impl Iterator<Item = (Source, Task, bool)> + '_ {
        self.entries
            .iter()
            .flat_map(|(s, row)| row.iter().map(move |(t, on)| (*s, *t, *on)))
    }
}

/// Which labels exist for each source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Both stream tasks read the observed stream outcome on either channel, so ad towers learn
    /// from promotion impressions.
    #[default]
    SharedStream,
    /// Each stream task only has labels on its own channel.
    ChannelStream,
}

impl LabelRule {
    pub fn available(self, s: Source, t: Task) -> bool {
        match (self, t) {
            (LabelRule::SharedStream, _) => true,
            (LabelRule::ChannelStream, Task::PromotionStream) => s == Source::Promotion,
            (LabelRule::ChannelStream, Task::AdStream) => s == Source::Ad,
            (LabelRule::ChannelStream, _) => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: BTreeMap<Task, f64>,
    pub mask: MaskPolicy,
    #[serde(default)]
    pub labels: LabelRule,
}

impl LossConfig {
    /// Spec weights, directional mask, shared stream labels.
    pub fn from_spec(spec: &TaskSpec) -> Self {
        Self {
            weights: spec.weights().clone(),
            mask: MaskPolicy::directional(spec),
            labels: LabelRule::SharedStream,
        }
    }

    pub fn tasks(&self) -> impl Iterator<Item = Task> + '_ {
        self.weights.keys().copied()
    }

    /// Whether a row from `s` with the label present contributes to task `t`.
    pub fn contributes(&self, s: Source, t: Task) -> bool {
        self.mask.allows(s, t) && self.labels.available(s, t)
    }
}
