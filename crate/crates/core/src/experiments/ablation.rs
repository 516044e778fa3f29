use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::dataio::{ImpressionTable, LogConfig, SplitSpec, Splits, World, WorldConfig};
use crate::evaluation::{average_precision, relative_change, score_table, source_rows};
use crate::model::{FeatureDims, ModelConfig, ModelParams, NormPlacement, Source, Task, TaskSpec};
use crate::training::{
    train, AdamConfig, LabelRule, LossConfig, SourceMode, TrainConfig, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskOverride {
    pub source: Source,
    pub task: Task,
    pub on: bool,
}

/// One configuration in the grid. Everything not declared here comes from the shared base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationArm {
    pub name: String,
    pub tasks: Vec<Task>,
    pub sources: SourceMode,
    #[serde(default)]
    pub mask_overrides: Vec<MaskOverride>,
}

impl AblationArm {
    pub fn spec(&self) -> Result<TaskSpec, ExperimentError> {
        Ok(TaskSpec::restricted_to(&self.tasks)?)
    }

    pub fn loss_config(&self, labels: LabelRule) -> Result<LossConfig, ExperimentError> {
        let spec = self.spec()?;
        let mut cfg = LossConfig::from_spec(&spec);
        cfg.labels = labels;
        for o in &self.mask_overrides {
            if !spec.contains(o.task) {
                return Err(ExperimentError::Config(format!(
                    "arm `{}` overrides the mask for {}, which it does not train",
                    self.name, o.task
                )));
            }
            cfg.mask.set(o.source, o.task, o.on);
        }
        Ok(cfg)
    }

    /// Head that scores promotion impressions: the promotion stream head, or the ad stream head
    /// when the arm has none.
    pub fn promotion_head(&self) -> Option<Task> {
        [Task::PromotionStream, Task::AdStream]
            .into_iter()
            .find(|t| self.tasks.contains(t))
    }

    /// Head that scores ad impressions: the ad stream head, or the promotion stream head when
    /// the arm has none.
    pub fn ad_head(&self) -> Option<Task> {
        [Task::AdStream, Task::PromotionStream]
            .into_iter()
            .find(|t| self.tasks.contains(t))
    }

    /// The promotions-only model reused to score ads.
    pub fn baseline() -> Self {
        Self {
            name: "Baseline (promotions model)".into(),
            tasks: vec![Task::PromotionStream, Task::Click, Task::Like, Task::Follow],
            sources: SourceMode::PromotionOnly,
            mask_overrides: vec![],
        }
    }

    pub fn promo_stream_only() -> Self {
        Self {
            name: "Promo Stream head-only".into(),
            tasks: vec![Task::PromotionStream],
            sources: SourceMode::Both,
            mask_overrides: vec![],
        }
    }

    pub fn ads_stream_only() -> Self {
        Self {
            name: "Ads Stream head-only".into(),
            tasks: vec![Task::AdStream],
            sources: SourceMode::AdOnly,
            mask_overrides: vec![],
        }
    }

    pub fn ads_stream_with_ancillary() -> Self {
        Self {
            name: "Ads Stream + ANC heads".into(),
            tasks: vec![Task::AdStream, Task::Click, Task::Like, Task::Follow],
            sources: SourceMode::AdOnly,
            mask_overrides: [Task::Like, Task::Follow]
                .into_iter()
                .map(|task| MaskOverride {
                    source: Source::Ad,
                    task,
                    on: true,
                })
                .collect(),
        }
    }

    pub fn joint() -> Self {
        Self {
            name: "Promo + Ads 5-task MTL".into(),
            tasks: Task::ALL.to_vec(),
            sources: SourceMode::Both,
            mask_overrides: vec![],
        }
    }

    /// Baseline followed by the four compared configurations.
    pub fn table1() -> Vec<Self> {
        vec![
            Self::baseline(),
            Self::promo_stream_only(),
            Self::ads_stream_only(),
            Self::ads_stream_with_ancillary(),
            Self::joint(),
        ]
    }
}

/// Hyperparameters pinned across every arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTraining {
    pub encoder_widths: Vec<usize>,
    pub tower_widths: Vec<usize>,
    #[serde(default)]
    pub norm: NormPlacement,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
    #[serde(default)]
    pub labels: LabelRule,
}

impl Default for BaseTraining {
    fn default() -> Self {
        Self {
            encoder_widths: vec![64, 32],
            tower_widths: vec![16],
            norm: NormPlacement::EncoderOutput,
            batch_size: 256,
            epochs: 4,
            optimizer: AdamConfig::default(),
            max_batches_per_epoch: None,
            labels: LabelRule::SharedStream,
        }
    }
}

impl BaseTraining {
    pub fn train_config(&self, dims: FeatureDims, arm: &AblationArm, seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                dims,
                encoder_widths: self.encoder_widths.clone(),
                tower_widths: self.tower_widths.clone(),
                norm: self.norm,
                tasks: arm.tasks.clone(),
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            sources: arm.sources,
            balanced: true,
            optimizer: self.optimizer,
            seed,
            max_batches_per_epoch: self.max_batches_per_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSetup {
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub logs: LogConfig,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

fn default_train_frac() -> f64 {
    0.6
}

fn default_val_frac() -> f64 {
    0.8
}

impl Default for DataSetup {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            logs: LogConfig::default(),
            train_frac: default_train_frac(),
            val_frac: default_val_frac(),
        }
    }
}

/// A generated world with its split impression tables.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub world: World,
    pub train: ImpressionTable,
    pub val: ImpressionTable,
    pub test: ImpressionTable,
}

impl DataSetup {
    pub fn split_spec(&self) -> Result<SplitSpec, ExperimentError> {
        let span = i64::from(self.logs.days) * 86_400;
        Ok(SplitSpec::at_fractions(
            self.logs.start_ts,
            span,
            self.train_frac,
            self.val_frac,
        )?)
    }

    /// World from `seed`, logs from a derived seed, then the temporal split.
    pub fn generate_splits(&self, seed: u64) -> Result<(World, Splits), ExperimentError> {
        if self.logs.n_ad == 0 || self.logs.n_promo == 0 {
            return Err(ExperimentError::Config(
                "both n_promo and n_ad must be positive for balanced training".into(),
            ));
        }
        let world = World::generate(&self.world, seed)?;
        let records = world.simulate_logs(&self.logs, seed ^ 0x5EED_1065)?;
        let splits = self.split_spec()?.apply(&records)?;
        Ok((world, splits))
    }

    pub fn generate(&self, seed: u64) -> Result<SeedData, ExperimentError> {
        let (world, splits) = self.generate_splits(seed)?;
        Ok(SeedData {
            seed,
            train: ImpressionTable::from_records(&splits.train)?,
            val: ImpressionTable::from_records(&splits.val)?,
            test: ImpressionTable::from_records(&splits.test)?,
            world,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Name of the arm every other arm is compared against.
    pub baseline: String,
    #[serde(default)]
    pub data: DataSetup,
    #[serde(default)]
    pub training: BaseTraining,
    pub arms: Vec<AblationArm>,
}

impl AblationConfig {
    pub fn table1(seeds: Vec<u64>) -> Self {
        Self {
            seeds,
            baseline: AblationArm::baseline().name,
            data: DataSetup::default(),
            training: BaseTraining::default(),
            arms: AblationArm::table1(),
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("at least one seed is required".into()));
        }
        if !self.arms.iter().any(|a| a.name == self.baseline) {
            return Err(ExperimentError::Config(format!(
                "baseline arm `{}` is not in the arm list",
                self.baseline
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.arms {
            if !names.insert(&a.name) {
                return Err(ExperimentError::Config(format!("arm `{}` listed twice", a.name)));
            }
            if a.promotion_head().is_none() {
                return Err(ExperimentError::Config(format!(
                    "arm `{}` has no stream head to score with",
                    a.name
                )));
            }
            a.loss_config(self.training.labels)?;
        }
        Ok(())
    }
}

/// Test-split AP of one trained arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmScores {
    /// Promotion stream labels on promotion impressions.
    pub promotions_ap: Option<f64>,
    /// Ad stream labels on ad impressions.
    pub ads_ap: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ArmOutcome {
    Ok(ArmScores),
    Failed { reason: String },
}

impl ArmOutcome {
    pub fn scores(&self) -> Option<&ArmScores> {
        match self {
            ArmOutcome::Ok(s) => Some(s),
            ArmOutcome::Failed { .. } => None,
        }
    }
}

pub fn score_arm(arm: &AblationArm, params: &ModelParams, test: &ImpressionTable) -> Result<(Option<f64>, Option<f64>), ExperimentError> {
    let scores = score_table(params, test)?;
    let ap_for = |head: Option<Task>, source: Source, label: Task| {
        let head = head?;
        let rows = source_rows(test, source, label);
        let s: Vec<f64> = rows.iter().map(|&i| scores[&head][i]).collect();
        let y: Vec<u8> = rows.iter().map(|&i| test.labels[&label][i] as u8).collect();
        average_precision(&s, &y).ok()
    };
    Ok((
        ap_for(arm.promotion_head(), Source::Promotion, Task::PromotionStream),
        ap_for(arm.ad_head(), Source::Ad, Task::AdStream),
    ))
}

/// Trains one arm on `data`; errors are returned rather than aborting the grid.
pub fn train_arm(
    cfg: &AblationConfig,
    arm: &AblationArm,
    data: &SeedData,
) -> Result<TrainOutcome, ExperimentError> {
    let spec = arm.spec()?;
    let loss = arm.loss_config(cfg.training.labels)?;
    let tc = cfg.training.train_config(data.world.feature_dims(), arm, data.seed);
    Ok(train(&tc, &spec, &loss, &data.train, &data.val)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub arms: BTreeMap<String, ArmOutcome>,
}

/// All arms for one seed. Trained models are handed to `keep` before being dropped.
pub fn run_seed(
    cfg: &AblationConfig,
    data: &SeedData,
    mut keep: impl FnMut(&AblationArm, &ModelParams),
) -> SeedResult {
    let mut arms = BTreeMap::new();
    for arm in &cfg.arms {
        let outcome = train_arm(cfg, arm, data).and_then(|out| {
            let (promotions_ap, ads_ap) = score_arm(arm, &out.params, &data.test)?;
            keep(arm, &out.params);
            Ok(ArmScores {
                promotions_ap,
                ads_ap,
                best_epoch: out.best_epoch,
            })
        });
        let outcome = match outcome {
            Ok(s) => ArmOutcome::Ok(s),
            Err(e) => ArmOutcome::Failed {
                reason: e.to_string(),
            },
        };
        arms.insert(arm.name.clone(), outcome);
    }
    SeedResult {
        seed: data.seed,
        arms,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub promotions_ap: Option<Summary>,
    pub ads_ap: Option<Summary>,
    /// Relative change of the mean AP against the baseline arm, in percent.
    pub promotions_rel: Option<f64>,
    pub ads_rel: Option<f64>,
    pub failed_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub baseline: String,
    pub seeds: Vec<SeedResult>,
    pub arms: Vec<ArmSummary>,
}

impl AblationResult {
    pub fn any_failed(&self) -> bool {
        self.arms.iter().any(|a| !a.failed_seeds.is_empty())
    }
}

pub fn summarize(cfg: &AblationConfig, seeds: Vec<SeedResult>) -> AblationResult {
    let collect = |name: &str, f: &dyn Fn(&ArmScores) -> Option<f64>| -> Vec<f64> {
        seeds
            .iter()
            .filter_map(|s| s.arms.get(name).and_then(ArmOutcome::scores).and_then(f))
            .collect()
    };
    let promo = |s: &ArmScores| s.promotions_ap;
    let ads = |s: &ArmScores| s.ads_ap;
    let base_p = Summary::of(&collect(&cfg.baseline, &promo));
    let base_a = Summary::of(&collect(&cfg.baseline, &ads));
    let rel = |c: Option<Summary>, b: Option<Summary>| relative_change(c?.mean, b?.mean).ok();
    let arms = cfg
        .arms
        .iter()
        .map(|arm| {
            let p = Summary::of(&collect(&arm.name, &promo));
            let a = Summary::of(&collect(&arm.name, &ads));
            ArmSummary {
                name: arm.name.clone(),
                promotions_ap: p,
                ads_ap: a,
                promotions_rel: rel(p, base_p),
                ads_rel: rel(a, base_a),
                failed_seeds: seeds
                    .iter()
                    .filter(|s| !matches!(s.arms.get(&arm.name), Some(ArmOutcome::Ok(_))))
                    .map(|s| s.seed)
                    .collect(),
            }
        })
        .collect();
    AblationResult {
        baseline: cfg.baseline.clone(),
        seeds,
        arms,
    }
}

/// Trains every arm on identical splits for every seed.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationResult, ExperimentError> {
    cfg.validate()?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let data = cfg.data.generate(seed)?;
        seeds.push(run_seed(cfg, &data, |_, _| {}));
    }
    Ok(summarize(cfg, seeds))
}
