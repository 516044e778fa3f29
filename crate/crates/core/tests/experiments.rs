use castmtl_core::dataio::{LogConfig, WorldConfig};
use castmtl_core::evaluation::Segment;
use castmtl_core::experiments::{
    emit_ablation_report, emit_replay_report, opportunities, render_ablation, render_replay,
    replay_arm, run_ablation, run_replay, AblationArm, AblationConfig, AblationResult,
    ArmOutcome, BaseTraining, MaskOverride, DataSetup, ExperimentError, ModelScorer, OracleScorer,
    RandomScorer, ReplayConfig,
};
use castmtl_core::model::{ModelConfig, ModelParams};
use castmtl_core::training::SourceMode;
use castmtl_core::{Source, Task};

fn small_setup() -> DataSetup {
    DataSetup {
        world: WorldConfig {
            n_users: 1_000,
            n_shows: 120,
            ..WorldConfig::default()
        },
        logs: LogConfig {
            n_promo: 4_000,
            n_ad: 1_000,
            ..LogConfig::default()
        },
        ..DataSetup::default()
    }
}

fn small_ablation(seeds: Vec<u64>) -> AblationConfig {
    AblationConfig {
        data: small_setup(),
        training: BaseTraining {
            encoder_widths: vec![16, 8],
            tower_widths: vec![4],
            batch_size: 64,
            epochs: 2,
            ..BaseTraining::default()
        },
        ..AblationConfig::table1(seeds)
    }
}

fn small_replay(seed: u64) -> ReplayConfig {
    ReplayConfig {
        n_opportunities: 2_000,
        pool_size: 10,
        cost_per_impression: 0.03,
        seed,
    }
}

#[test]
fn table1_grid_has_five_rows_and_a_zero_baseline() {
    let r = run_ablation(&small_ablation(vec![1, 2])).unwrap();
    assert_eq!(r.arms.len(), 5);
    assert!(!r.any_failed());
    let base = r.arms.iter().find(|a| a.name == r.baseline).unwrap();
    assert_eq!(base.promotions_rel, Some(0.0));
    assert_eq!(base.ads_rel, Some(0.0));
    for a in &r.arms {
        assert_eq!(a.promotions_ap.unwrap().n, 2, "{}", a.name);
        assert_eq!(a.ads_ap.unwrap().n, 2, "{}", a.name);
    }
    let text = render_ablation(&r).unwrap();
    let blocks: Vec<&str> = text.split("\n\n").collect();
    let rows: Vec<&str> = blocks[0].lines().skip(2).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split_whitespace().rev().take(2).collect();
        for c in cols {
            assert!(c.ends_with('%') && (c.starts_with('+') || c.starts_with('-')), "{row}");
        }
    }
    assert_eq!(blocks[1].lines().count(), 6);
}

#[test]
fn ablation_is_reproducible() {
    let cfg = small_ablation(vec![3]);
    assert_eq!(run_ablation(&cfg).unwrap(), run_ablation(&cfg).unwrap());
}

#[test]
fn failing_arm_is_reported_without_stopping_the_grid() {
    let mut cfg = small_ablation(vec![4]);
    // Ad stream switched off and Like masked on ad rows: nothing to learn from.
    cfg.arms.push(AblationArm {
        name: "broken".into(),
        tasks: vec![Task::AdStream, Task::Like],
        sources: SourceMode::AdOnly,
        mask_overrides: vec![MaskOverride {
            source: Source::Ad,
            task: Task::AdStream,
            on: false,
        }],
    });
    let r = run_ablation(&cfg).unwrap();
    assert!(r.any_failed());
    let s = &r.seeds[0];
    assert!(matches!(s.arms["broken"], ArmOutcome::Failed { .. }));
    assert_eq!(s.arms.values().filter(|o| matches!(o, ArmOutcome::Ok(_))).count(), 5);
}

#[test]
fn config_validation() {
    let mut cfg = small_ablation(vec![]);
    assert!(run_ablation(&cfg).is_err());
    cfg.seeds = vec![1];
    cfg.baseline = "nope".into();
    assert!(matches!(run_ablation(&cfg), Err(ExperimentError::Config(_))));
    let mut cfg = small_ablation(vec![1]);
    cfg.data.logs.n_ad = 0;
    let err = run_ablation(&cfg).unwrap_err();
    assert!(err.to_string().contains("n_ad"), "{err}");
}

#[test]
fn empty_results_are_an_error() {
    let empty = AblationResult {
        baseline: "b".into(),
        seeds: vec![],
        arms: vec![],
    };
    assert!(matches!(render_ablation(&empty), Err(ExperimentError::EmptyResults)));
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_ablation_report(&empty, dir.path()).is_err());
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
    assert!(matches!(render_replay(&[]), Err(ExperimentError::EmptyResults)));
    assert!(emit_replay_report(&[], dir.path()).is_err());
}

#[test]
fn identical_arms_have_zero_deltas() {
    let data = small_setup().generate(5).unwrap();
    let params = ModelParams::init(
        &ModelConfig {
            dims: data.world.feature_dims(),
            ..ModelConfig::default()
        },
        9,
    )
    .unwrap();
    let scorer = |name: &str| ModelScorer {
        name: name.into(),
        params: &params,
        head: Task::AdStream,
    };
    let r = run_replay(&data.world, &small_replay(5), &scorer("a"), &scorer("b")).unwrap();
    assert_eq!(r.baseline.segments, r.candidate.segments);
    for d in &r.deltas {
        for v in [d.i2s, d.ecps, d.ctr, d.streams].into_iter().flatten() {
            assert_eq!(v, 0.0, "{:?}", d.segment);
        }
    }
}

#[test]
fn replay_accounting_and_pairing() {
    let data = small_setup().generate(6).unwrap();
    let cfg = small_replay(6);
    let a = replay_arm(&data.world, &cfg, &OracleScorer).unwrap();
    let b = replay_arm(&data.world, &cfg, &RandomScorer { seed: 1 }).unwrap();
    assert_eq!(a.checksum, b.checksum);
    for arm in [&a, &b] {
        let all = arm.segment(Segment::All).unwrap();
        assert_eq!(all.impressions, cfg.n_opportunities as u64);
        assert_eq!(all.spend_micros, 30_000 * cfg.n_opportunities as u64);
    }
    // the opportunity stream depends only on the seed
    let other = replay_arm(&data.world, &small_replay(7), &OracleScorer).unwrap();
    assert_ne!(a.checksum, other.checksum);
    assert_eq!(opportunities(&data.world, &cfg).unwrap(), opportunities(&data.world, &cfg).unwrap());
}

#[test]
fn empty_candidate_pool_is_an_error() {
    let data = small_setup().generate(8).unwrap();
    let cfg = ReplayConfig {
        pool_size: 0,
        ..small_replay(8)
    };
    let err = run_replay(&data.world, &cfg, &OracleScorer, &OracleScorer).unwrap_err();
    assert!(err.to_string().contains("candidate pool is empty"), "{err}");
}

/// The true-probability arm beats random serving by at least 3 standard errors.
#[test]
fn oracle_dominates_random() {
    let mut diffs = Vec::new();
    for seed in 0..10 {
        let data = small_setup().generate(seed).unwrap();
        let cfg = small_replay(seed);
        let r = run_replay(&data.world, &cfg, &RandomScorer { seed }, &OracleScorer).unwrap();
        let i2s = |arm: &castmtl_core::experiments::ArmReplay| arm.segment(Segment::All).unwrap().i2s.unwrap();
        assert!(i2s(&r.candidate) > i2s(&r.baseline), "seed {seed}");
        diffs.push(i2s(&r.candidate) - i2s(&r.baseline));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean > 3.0 * sd / n.sqrt(), "mean {mean} sd {sd}");
}

#[test]
fn replay_report_layout() {
    let data = small_setup().generate(9).unwrap();
    let r = run_replay(&data.world, &small_replay(9), &RandomScorer { seed: 2 }, &OracleScorer).unwrap();
    let text = render_replay(std::slice::from_ref(&r)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let header: Vec<&str> = lines[1].split_whitespace().collect();
    assert_eq!(header, ["segment", "i2s", "eCPS", "CTR", "streams"]);
    assert!(lines[2].starts_with("all "));
    assert!(lines[3].starts_with("less-streamed "));
    assert!(lines[4].is_empty());
    for (k, t) in (0..6).enumerate() {
        assert!(lines[6 + k].starts_with(&format!("tier {t} ")), "{}", lines[6 + k]);
    }
    let dir = tempfile::tempdir().unwrap();
    let files = emit_replay_report(&[r.clone()], dir.path()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert_eq!(json[0]["deltas"].as_array().unwrap().len(), r.deltas.len());
    assert_eq!(std::fs::read_to_string(&files[1]).unwrap(), text);
}
