use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Binary prediction task. The declaration order is the canonical task order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    PromotionStream,
    AdStream,
    Click,
    Like,
    Follow,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::PromotionStream,
        Task::AdStream,
        Task::Click,
        Task::Like,
        Task::Follow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::PromotionStream => "PromotionStream",
            Task::AdStream => "AdStream",
            Task::Click => "Click",
            Task::Like => "Like",
            Task::Follow => "Follow",
        }
    }

    pub fn is_stream(self) -> bool {
        matches!(self, Task::PromotionStream | Task::AdStream)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

/// Channel an impression was served through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "P")]
    Promotion,
    #[serde(rename = "A")]
    Ad,
}

impl Source {
    pub const BOTH: [Source; 2] = [Source::Promotion, Source::Ad];

    pub fn code(self) -> &'static str {
        match self {
            Source::Promotion => "P",
            Source::Ad => "A",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "P" => Ok(Source::Promotion),
            "A" => Ok(Source::Ad),
            _ => Err(format!("unknown source `{s}`")),
        }
    }
}

/// Task universe, its split into promotion and ad tasks, and per-task loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    tasks: Vec<Task>,
    promo_tasks: BTreeSet<Task>,
    ad_tasks: BTreeSet<Task>,
    weights: BTreeMap<Task, f64>,
}

impl TaskSpec {
    /// Tasks missing from `weights` get weight 1.
    pub fn new(
        tasks: Vec<Task>,
        promo_tasks: BTreeSet<Task>,
        ad_tasks: BTreeSet<Task>,
        weights: BTreeMap<Task, f64>,
    ) -> Result<Self, ModelError> {
        if tasks.is_empty() {
            return Err(ModelError::Config("task list is empty".into()));
        }
        let listed: BTreeSet<Task> = tasks.iter().copied().collect();
        if listed.len() != tasks.len() {
            return Err(ModelError::Config("duplicate task in task list".into()));
        }
        for t in promo_tasks.iter().chain(&ad_tasks) {
            if !listed.contains(t) {
                return Err(ModelError::Config(format!(
                    "task {t} assigned to a channel but not in the task list"
                )));
            }
        }
        for t in &tasks {
            if !promo_tasks.contains(t) && !ad_tasks.contains(t) {
                return Err(ModelError::Config(format!(
                    "task {t} belongs to neither promotion nor ad tasks"
                )));
            }
        }
        let mut full = BTreeMap::new();
        for t in &tasks {
            let w = weights.get(t).copied().unwrap_or(1.0);
            if !(w.is_finite() && w >= 0.0) {
                return Err(ModelError::Config(format!("weight for {t} must be >= 0, got {w}")));
            }
            full.insert(*t, w);
        }
        if let Some(t) = weights.keys().find(|t| !listed.contains(t)) {
            return Err(ModelError::Config(format!("weight given for unlisted task {t}")));
        }
        Ok(Self {
            tasks,
            promo_tasks,
            ad_tasks,
            weights: full,
        })
    }

    /// All five tasks. Click belongs to both channels; Like and Follow are promotion tasks.
    pub fn five_task() -> Self {
        use Task::*;
        Self::new(
            Task::ALL.to_vec(),
            [PromotionStream, Click, Like, Follow].into(),
            [AdStream, Click].into(),
            BTreeMap::new(),
        )
        .expect("static task spec is valid")
    }

    /// Restricts the five-task channel assignment to `tasks`.
    pub fn restricted_to(tasks: &[Task]) -> Result<Self, ModelError> {
        let full = Self::five_task();
        let keep: BTreeSet<Task> = tasks.iter().copied().collect();
        Self::new(
            tasks.to_vec(),
            full.promo_tasks.intersection(&keep).copied().collect(),
            full.ad_tasks.intersection(&keep).copied().collect(),
            BTreeMap::new(),
        )
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn promo_tasks(&self) -> &BTreeSet<Task> {
        &self.promo_tasks
    }

    pub fn ad_tasks(&self) -> &BTreeSet<Task> {
        &self.ad_tasks
    }

    pub fn contains(&self, t: Task) -> bool {
        self.weights.contains_key(&t)
    }

    pub fn weight(&self, t: Task) -> f64 {
        self.weights.get(&t).copied().unwrap_or(0.0)
    }

    pub fn weights(&self) -> &BTreeMap<Task, f64> {
        &self.weights
    }

    pub fn set_weight(&mut self, t: Task, w: f64) -> Result<(), ModelError> {
        if !self.contains(t) {
            return Err(ModelError::TaskNotFound(t));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(ModelError::Config(format!("weight for {t} must be >= 0, got {w}")));
        }
        self.weights.insert(t, w);
        Ok(())
    }

    /// In the promotion set but not the ad set.
    pub fn is_promo_only(&self, t: Task) -> bool {
        self.promo_tasks.contains(&t) && !self.ad_tasks.contains(&t)
    }

    /// Sources whose impressions define the task's evaluation population.
    pub fn home_sources(&self, t: Task) -> Vec<Source> {
        let mut out = Vec::new();
        if self.promo_tasks.contains(&t) {
            out.push(Source::Promotion);
        }
        if self.ad_tasks.contains(&t) {
            out.push(Source::Ad);
        }
        out
    }
}
