//! File configurations for each command. Flags override file values; the resolved struct is
//! what gets recorded in the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use castmtl_core::dataio::{LogConfig, WorldConfig};
use castmtl_core::experiments::{AblationArm, BaseTraining, DataSetup};
use castmtl_core::model::NormPlacement;
use castmtl_core::training::{AdamConfig, LabelRule, SourceMode};
use castmtl_core::Task;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn read_toml_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    path.map_or_else(|| Ok(T::default()), read_toml)
}

fn default_train_frac() -> f64 {
    0.6
}

fn default_val_frac() -> f64 {
    0.8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub logs: LogConfig,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: None,
            world: WorldConfig::default(),
            logs: LogConfig::default(),
            train_frac: default_train_frac(),
            val_frac: default_val_frac(),
        }
    }
}

impl GenerateConfig {
    pub fn data_setup(&self) -> DataSetup {
        DataSetup {
            world: self.world.clone(),
            logs: self.logs.clone(),
            train_frac: self.train_frac,
            val_frac: self.val_frac,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub seed: Option<u64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_encoder")]
    pub encoder_widths: Vec<usize>,
    #[serde(default = "default_tower")]
    pub tower_widths: Vec<usize>,
    #[serde(default)]
    pub norm: NormPlacement,
    #[serde(default = "all_tasks")]
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub sources: SourceMode,
    #[serde(default = "yes")]
    pub balanced: bool,
    #[serde(default)]
    pub labels: LabelRule,
    #[serde(default)]
    pub max_batches_per_epoch: Option<usize>,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Per-task loss weights; unlisted tasks weigh 1.
    #[serde(default)]
    pub weights: BTreeMap<Task, f64>,
}

fn default_epochs() -> usize {
    3
}

fn default_batch_size() -> usize {
    256
}

fn default_encoder() -> Vec<usize> {
    vec![64, 32]
}

fn default_tower() -> Vec<usize> {
    vec![16]
}

fn all_tasks() -> Vec<Task> {
    Task::ALL.to_vec()
}

fn yes() -> bool {
    true
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        Self {
            seed: None,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            encoder_widths: default_encoder(),
            tower_widths: default_tower(),
            norm: NormPlacement::default(),
            tasks: all_tasks(),
            sources: SourceMode::default(),
            balanced: true,
            labels: LabelRule::default(),
            max_batches_per_epoch: None,
            optimizer: AdamConfig::default(),
            weights: BTreeMap::new(),
        }
    }
}

/// Where a replay arm's model comes from: trained per seed from a named arm, or loaded from disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmRef {
    pub arm: Option<String>,
    pub model: Option<PathBuf>,
    /// Head used for scoring; defaults to the ad stream head, else the promotion stream head.
    pub head: Option<Task>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayParams {
    pub n_opportunities: usize,
    pub pool_size: usize,
    pub cost_per_impression: f64,
}

impl Default for ReplayParams {
    fn default() -> Self {
        let d = castmtl_core::experiments::ReplayConfig::default();
        Self {
            n_opportunities: d.n_opportunities,
            pool_size: d.pool_size,
            cost_per_impression: d.cost_per_impression,
        }
    }
}

fn table1_arms() -> Vec<AblationArm> {
    AblationArm::table1()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySpec {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub replay: ReplayParams,
    #[serde(default)]
    pub data: DataSetup,
    #[serde(default)]
    pub training: BaseTraining,
    /// Arms that `baseline` and `candidate` may name.
    #[serde(default = "table1_arms")]
    pub arms: Vec<AblationArm>,
    pub baseline: ArmRef,
    pub candidate: ArmRef,
}

/// Size overrides shared by the experiment commands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct DataOverrides {
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_batches_per_epoch: Option<usize>,
    #[arg(long)]
    pub n_users: Option<usize>,
    #[arg(long)]
    pub n_shows: Option<usize>,
    #[arg(long)]
    pub n_promo: Option<usize>,
    #[arg(long)]
    pub n_ad: Option<usize>,
}

impl DataOverrides {
    pub fn apply(&self, seeds: &mut Vec<u64>, data: &mut DataSetup, training: &mut BaseTraining) {
        if let Some(s) = &self.seeds {
            seeds.clone_from(s);
        }
        if let Some(v) = self.epochs {
            training.epochs = v;
        }
        if let Some(v) = self.batch_size {
            training.batch_size = v;
        }
        if let Some(v) = self.max_batches_per_epoch {
            training.max_batches_per_epoch = Some(v);
        }
        if let Some(v) = self.n_users {
            data.world.n_users = v;
        }
        if let Some(v) = self.n_shows {
            data.world.n_shows = v;
        }
        if let Some(v) = self.n_promo {
            data.logs.n_promo = v;
        }
        if let Some(v) = self.n_ad {
            data.logs.n_ad = v;
        }
    }
}
