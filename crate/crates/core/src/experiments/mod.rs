//! Ablation harness over task/source configurations and a paired replay simulator.

mod ablation;
mod replay;
mod report;

pub use ablation::{
    run_ablation, run_seed, score_arm, summarize, train_arm, AblationArm, AblationConfig,
    AblationResult, ArmOutcome, ArmScores, ArmSummary, BaseTraining, DataSetup, MaskOverride,
    SeedData, SeedResult, Summary,
};
pub use replay::{
    deltas, opportunities, replay_arm, run_replay, ArmReplay, ModelScorer, Opportunity,
    OracleScorer, RandomScorer, ReplayConfig, ReplayResult, Scorer, SegmentDelta, tier_gain,
};
pub use report::{
    emit_ablation_report, emit_replay_report, render_ablation, render_replay, ReplayTableRow,
};

use crate::dataio::DataError;
use crate::evaluation::EvalError;
use crate::model::ModelError;
use crate::training::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("no results to report")]
    EmptyResults,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
