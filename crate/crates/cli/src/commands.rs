use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use castmtl_core::dataio::{read_catalog, read_impressions, write_catalog, write_impressions, ImpressionTable};
use castmtl_core::evaluation::{
    ap_by_task, default_segments, online_metrics, ranked_predictions, score_table, to_micros,
    EvalOptions, MetricsReport, ReportMetadata, ServedImpression,
};
use castmtl_core::experiments::{
    emit_ablation_report, emit_replay_report, run_ablation, run_replay, train_arm, AblationArm,
    AblationConfig, ModelScorer, ReplayConfig,
};
use castmtl_core::model::{ModelConfig, ModelParams, TaskSpec};
use castmtl_core::training::{train, write_log, LossConfig, TrainConfig, TrainError};
use castmtl_core::{Source, Task};
use serde::Serialize;

use crate::config::{
    read_toml, read_toml_or_default, ArmRef, DataOverrides, GenerateConfig, ReplaySpec, TrainFileConfig,
};
use crate::error::CliError;
use crate::manifest::{sha256_file, ManifestBuilder};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} not found at {}", path.display())))
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct GenerateOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_users: Option<usize>,
    #[arg(long)]
    pub n_shows: Option<usize>,
    #[arg(long)]
    pub n_promo: Option<usize>,
    #[arg(long)]
    pub n_ad: Option<usize>,
}

pub fn cmd_generate(config: Option<&Path>, out: &Path, o: &GenerateOverrides) -> Result<(), CliError> {
    let manifest = ManifestBuilder::start("generate");
    let mut cfg: GenerateConfig = read_toml_or_default(config)?;
    cfg.seed = o.seed.or(cfg.seed);
    if let Some(v) = o.n_users {
        cfg.world.n_users = v;
    }
    if let Some(v) = o.n_shows {
        cfg.world.n_shows = v;
    }
    if let Some(v) = o.n_promo {
        cfg.logs.n_promo = v;
    }
    if let Some(v) = o.n_ad {
        cfg.logs.n_ad = v;
    }
    let seed = cfg
        .seed
        .ok_or_else(|| CliError::Usage("a seed is required: set `seed` in the config or pass --seed".into()))?;
    if cfg.logs.n_ad == 0 {
        return Err(CliError::Usage(
            "n_ad = 0: source-balanced training needs ad impressions; refusing to generate".into(),
        ));
    }
    let (world, splits) = cfg.data_setup().generate_splits(seed)?;
    create_dir(out)?;
    let paths: Vec<PathBuf> = [TRAIN_FILE, VAL_FILE, TEST_FILE, CATALOG_FILE].iter().map(|f| out.join(f)).collect();
    write_impressions(&splits.train, &paths[0])?;
    write_impressions(&splits.val, &paths[1])?;
    write_impressions(&splits.test, &paths[2])?;
    write_catalog(&world.catalog.rows(), &paths[3])?;
    println!(
        "wrote {} train, {} val, {} test impressions and {} shows to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        world.catalog.len(),
        out.display()
    );
    let inputs: Vec<PathBuf> = config.map(Path::to_path_buf).into_iter().collect();
    manifest.write(&out.join(MANIFEST_FILE), &cfg, Some(seed), &inputs, &paths)
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_batches_per_epoch: Option<usize>,
}

fn load_table(path: &Path, what: &str) -> Result<ImpressionTable, CliError> {
    require_file(path, what)?;
    Ok(ImpressionTable::from_records(&read_impressions(path)?)?)
}

pub fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, o: &TrainOverrides) -> Result<(), CliError> {
    let manifest = ManifestBuilder::start("train");
    let mut cfg: TrainFileConfig = read_toml_or_default(config)?;
    cfg.seed = o.seed.or(cfg.seed);
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.max_batches_per_epoch {
        cfg.max_batches_per_epoch = Some(v);
    }
    let seed = cfg
        .seed
        .ok_or_else(|| CliError::Usage("a seed is required: set `seed` in the config or pass --seed".into()))?;
    let train_path = data.join(TRAIN_FILE);
    let val_path = data.join(VAL_FILE);
    let train_rows = load_table(&train_path, "training split")?;
    let val_rows = load_table(&val_path, "validation split")?;
    if train_rows.is_empty() {
        return Err(CliError::Data(format!("{} is empty", train_path.display())));
    }
    let mut spec = TaskSpec::restricted_to(&cfg.tasks)?;
    for (t, w) in &cfg.weights {
        if !spec.contains(*t) {
            return Err(CliError::Usage(format!("weight given for {t}, which is not a trained task")));
        }
        spec.set_weight(*t, *w)?;
    }
    let mut loss = LossConfig::from_spec(&spec);
    loss.labels = cfg.labels;
    let tc = TrainConfig {
        model: ModelConfig {
            dims: train_rows.dims(),
            encoder_widths: cfg.encoder_widths.clone(),
            tower_widths: cfg.tower_widths.clone(),
            norm: cfg.norm,
            tasks: spec.tasks().to_vec(),
        },
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        sources: cfg.sources,
        balanced: cfg.balanced,
        optimizer: cfg.optimizer,
        seed,
        max_batches_per_epoch: cfg.max_batches_per_epoch,
    };
    let outcome = match train(&tc, &spec, &loss, &train_rows, &val_rows) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            batch,
            reason,
            last_good,
        }) => {
            let fallback = sibling(out, ".last_good");
            last_good.save(&fallback)?;
            return Err(CliError::Diverged(format!(
                "training diverged at epoch {epoch}, batch {batch}: {reason}; last good parameters saved to {}",
                fallback.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    outcome.params.save(out)?;
    let log_path = sibling(out, ".log.jsonl");
    write_log(&outcome.log, &log_path).map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;
    for e in &outcome.log {
        println!(
            "epoch {} batches {} loss {:.5} selection {}",
            e.epoch,
            e.batches,
            e.train_loss,
            e.selection_score.map_or_else(|| "-".into(), |s| format!("{s:.4}"))
        );
    }
    println!("best epoch {} saved to {}", outcome.best_epoch, out.display());
    #[derive(Serialize)]
    struct Resolved<'a> {
        file: &'a TrainFileConfig,
        train: &'a TrainConfig,
    }
    let mut inputs: Vec<PathBuf> = config.map(Path::to_path_buf).into_iter().collect();
    inputs.extend([train_path, val_path]);
    manifest.write(
        &sibling(out, ".manifest.json"),
        &Resolved { file: &cfg, train: &tc },
        Some(seed),
        &inputs,
        &[out.to_path_buf(), log_path],
    )
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct EvalFlags {
    /// Score with the labels themselves instead of the model (sanity ceiling: AP = 1).
    #[arg(long)]
    pub debug_oracle_scores: bool,
    /// Also evaluate tasks on sources outside their home channels.
    #[arg(long)]
    pub foreign_sources: bool,
    /// Also report interpolated AP.
    #[arg(long)]
    pub interpolated: bool,
    /// Also report ROC AUC.
    #[arg(long)]
    pub auc: bool,
    /// Seed recorded in the report metadata.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cmd_eval(model: &Path, data: &Path, catalog: &Path, out: &Path, f: &EvalFlags) -> Result<(), CliError> {
    let manifest = ManifestBuilder::start("eval");
    require_file(model, "model")?;
    require_file(data, "data")?;
    require_file(catalog, "catalog")?;
    let params = ModelParams::load(model)?;
    let records = read_impressions(data)?;
    let table = ImpressionTable::from_records(&records)?;
    let shows = read_catalog(catalog)?;
    if !table.is_empty() && table.dims() != params.config().dims {
        return Err(CliError::Data(format!(
            "feature widths {:?} in {} do not match the model's {:?}",
            table.dims(),
            data.display(),
            params.config().dims
        )));
    }
    for &t in params.tasks() {
        if !table.present[&t].iter().any(|&p| p) {
            return Err(CliError::Data(format!(
                "task mismatch: the model predicts {t} but {} carries no {t} labels",
                data.display()
            )));
        }
    }
    let scores: BTreeMap<Task, Vec<f64>> = if f.debug_oracle_scores {
        params.tasks().iter().map(|&t| (t, table.labels[&t].clone())).collect()
    } else {
        score_table(&params, &table)?
    };
    let spec = TaskSpec::restricted_to(params.tasks())?;
    let loss = LossConfig::from_spec(&spec);
    let opts = EvalOptions {
        foreign_sources: f.foreign_sources,
        interpolated: f.interpolated,
        auc: f.auc,
    };
    let ap = ap_by_task(&ranked_predictions(&scores, &table, &spec, &loss, opts), opts);
    for (t, a) in &ap {
        if a.ap.is_none() {
            eprintln!("warning: AP for {t} is undefined ({} rows, {} positives)", a.rows, a.positives);
        }
    }
    let served: Vec<ServedImpression> = records
        .iter()
        .filter(|r| r.source == Source::Ad)
        .filter_map(|r| {
            Some(ServedImpression {
                show_id: r.show_id,
                streamed: r.label(Task::AdStream)? == 1,
                clicked: r.label(Task::Click) == Some(1),
                spend_micros: to_micros(r.cost),
            })
        })
        .collect();
    let online = online_metrics(&served, &shows)?;
    let report = MetricsReport {
        metadata: ReportMetadata {
            model_id: sha256_file(model)?,
            dataset_id: sha256_file(data)?,
            seed: f.seed,
        },
        ap,
        segments: online.rows(),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(out, &(report.to_json() + "\n"))?;
    let table_text = report.render_table(&default_segments());
    let text_path = sibling(out, ".txt");
    write_text(&text_path, &table_text)?;
    print!("{table_text}");
    #[derive(Serialize)]
    struct Resolved<'a> {
        flags: &'a EvalFlagsView,
    }
    #[derive(Serialize)]
    struct EvalFlagsView {
        debug_oracle_scores: bool,
        foreign_sources: bool,
        interpolated: bool,
        auc: bool,
    }
    let view = EvalFlagsView {
        debug_oracle_scores: f.debug_oracle_scores,
        foreign_sources: f.foreign_sources,
        interpolated: f.interpolated,
        auc: f.auc,
    };
    manifest.write(
        &sibling(out, ".manifest.json"),
        &Resolved { flags: &view },
        f.seed,
        &[model.to_path_buf(), data.to_path_buf(), catalog.to_path_buf()],
        &[out.to_path_buf(), text_path],
    )
}

pub fn cmd_ablate(spec_path: &Path, out: &Path, o: &DataOverrides) -> Result<(), CliError> {
    let manifest = ManifestBuilder::start("ablate");
    let mut cfg: AblationConfig = read_toml(spec_path)?;
    o.apply(&mut cfg.seeds, &mut cfg.data, &mut cfg.training);
    cfg.validate()?;
    let result = run_ablation(&cfg)?;
    let files = emit_ablation_report(&result, out)?;
    print!("{}", std::fs::read_to_string(&files[1]).unwrap_or_default());
    manifest.write(&out.join(MANIFEST_FILE), &cfg, None, &[spec_path.to_path_buf()], &files)?;
    if result.any_failed() {
        let failed: Vec<String> = result
            .arms
            .iter()
            .filter(|a| !a.failed_seeds.is_empty())
            .map(|a| format!("{} (seeds {:?})", a.name, a.failed_seeds))
            .collect();
        return Err(CliError::ArmFailed(format!("failed arms: {}", failed.join(", "))));
    }
    Ok(())
}

/// A replay arm after validation: either a loaded model or an arm to train per seed.
enum ResolvedArm {
    Model { name: String, params: Box<ModelParams>, head: Task },
    Train { arm: AblationArm, head: Task },
}

fn resolve_arm(r: &ArmRef, role: &str, spec: &ReplaySpec, spec_dir: &Path) -> Result<ResolvedArm, CliError> {
    match (&r.arm, &r.model) {
        (Some(name), None) => {
            let arm = spec
                .arms
                .iter()
                .find(|a| &a.name == name)
                .ok_or_else(|| CliError::Usage(format!("{role}: unknown arm `{name}`")))?
                .clone();
            let head = match r.head {
                Some(h) if arm.tasks.contains(&h) => h,
                Some(h) => return Err(CliError::Usage(format!("{role}: arm `{name}` has no {h} head"))),
                None => arm
                    .ad_head()
                    .ok_or_else(|| CliError::Usage(format!("{role}: arm `{name}` has no stream head")))?,
            };
            Ok(ResolvedArm::Train { arm, head })
        }
        (None, Some(path)) => {
            let path = if path.is_absolute() { path.clone() } else { spec_dir.join(path) };
            if !path.is_file() {
                return Err(CliError::Usage(format!("{role}: model {} does not exist", path.display())));
            }
            let params = ModelParams::load(&path)?;
            let head = r.head.unwrap_or(if params.has_task(Task::AdStream) {
                Task::AdStream
            } else {
                Task::PromotionStream
            });
            if !params.has_task(head) {
                return Err(CliError::Usage(format!("{role}: model {} has no {head} head", path.display())));
            }
            if params.config().dims != spec.data.world.feature_dims() {
                return Err(CliError::Usage(format!(
                    "{role}: model {} expects features {:?}, the replay world has {:?}",
                    path.display(),
                    params.config().dims,
                    spec.data.world.feature_dims()
                )));
            }
            Ok(ResolvedArm::Model {
                name: path.display().to_string(),
                params: Box::new(params),
                head,
            })
        }
        _ => Err(CliError::Usage(format!("{role}: give exactly one of `arm` or `model`"))),
    }
}

pub fn cmd_replay(spec_path: &Path, out: &Path, o: &DataOverrides) -> Result<(), CliError> {
    let manifest = ManifestBuilder::start("replay");
    let mut spec: ReplaySpec = read_toml(spec_path)?;
    o.apply(&mut spec.seeds, &mut spec.data, &mut spec.training);
    if spec.seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let spec_dir = spec_path.parent().unwrap_or(Path::new("."));
    let baseline = resolve_arm(&spec.baseline, "baseline", &spec, spec_dir)?;
    let candidate = resolve_arm(&spec.candidate, "candidate", &spec, spec_dir)?;
    let ablation = AblationConfig {
        seeds: spec.seeds.clone(),
        baseline: String::new(),
        data: spec.data.clone(),
        training: spec.training.clone(),
        arms: spec.arms.clone(),
    };
    let mut results = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let data = spec.data.generate(seed)?;
        let mut models = Vec::with_capacity(2);
        for arm in [&baseline, &candidate] {
            models.push(match arm {
                ResolvedArm::Model { name, params, head } => (name.clone(), (**params).clone(), *head),
                ResolvedArm::Train { arm, head } => {
                    let trained = train_arm(&ablation, arm, &data).map_err(|e| {
                        CliError::ArmFailed(format!("arm `{}` failed on seed {seed}: {e}", arm.name))
                    })?;
                    (arm.name.clone(), trained.params, *head)
                }
            });
        }
        let scorer = |i: usize| ModelScorer {
            name: models[i].0.clone(),
            params: &models[i].1,
            head: models[i].2,
        };
        let cfg = ReplayConfig {
            n_opportunities: spec.replay.n_opportunities,
            pool_size: spec.replay.pool_size,
            cost_per_impression: spec.replay.cost_per_impression,
            seed,
        };
        results.push(run_replay(&data.world, &cfg, &scorer(0), &scorer(1))?);
    }
    let files = emit_replay_report(&results, out)?;
    print!("{}", std::fs::read_to_string(&files[1]).unwrap_or_default());
    manifest.write(&out.join(MANIFEST_FILE), &spec, None, &[spec_path.to_path_buf()], &files)
}

pub fn cmd_inspect(model: &Path) -> Result<(), CliError> {
    require_file(model, "model")?;
    let params = ModelParams::load(model)?;
    let mut out = String::new();
    let _ = writeln!(out, "model {}", model.display());
    let _ = writeln!(out, "sha256 {}", sha256_file(model)?);
    let _ = writeln!(
        out,
        "config {}",
        serde_json::to_string_pretty(params.config()).expect("config serializes")
    );
    let _ = writeln!(out, "trainable parameters {}", params.parameter_count());
    let _ = writeln!(
        out,
        "{:<36} {:>9} {:>11} {:>11} {:>11} {:>11} {:>11}",
        "block", "shape", "mean", "sd", "min", "max", "l2"
    );
    for (name, m) in params.all_blocks() {
        let d = m.data();
        let n = d.len().max(1) as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l2 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let _ = writeln!(
            out,
            "{:<36} {:>9} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e}",
            name,
            format!("{}x{}", m.rows(), m.cols()),
            mean,
            sd,
            min,
            max,
            l2
        );
    }
    print!("{out}");
    Ok(())
}
