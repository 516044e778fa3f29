//! Acceptance checks. Each criterion prints one PASS or FAIL line followed by a summary.
//! With `ACCEPTANCE_STRICT=1` any failure makes the process exit nonzero.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use castmtl_core::dataio::CatalogRow;
use castmtl_core::evaluation::{average_precision, online_metrics, Segment, ServedImpression};
use castmtl_core::experiments::{
    run_replay, run_seed, tier_gain, AblationArm, AblationConfig, ArmScores, ModelScorer, ReplayConfig,
};
use castmtl_core::model::{FeatureBatch, FeatureDims, ModelConfig, ModelParams, TaskSpec};
use castmtl_core::numerics::{Gradients, Matrix, NormMode, Tape};
use castmtl_core::training::{traced_loss, BalancedSampler, Batch, LossConfig};
use castmtl_core::{Source, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and thresholds.
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error; gradients below it are compared absolutely.
const FD_REL_FLOOR: f64 = 1e-5;
const FD_INSTANCES: usize = 100;
const FD_BUDGET_SECS: f64 = 120.0;
const ISOLATION_BATCHES: usize = 50;
const ISOLATION_MIN_ENCODER: usize = 49;
const AP_INSTANCES: usize = 1000;
const AP_TOL: f64 = 1e-12;
const TABLE1_SEEDS: u64 = 10;
const TABLE1_BUDGET_SECS: f64 = 30.0 * 60.0;
const LAMBDA_TOL: f64 = 1e-12;

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, dims: &FeatureDims, sources: Vec<Source>) -> Batch {
    let n = sources.len();
    let features = FeatureBatch {
        user: random_matrix(rng, n, dims.user),
        content: random_matrix(rng, n, dims.content),
        context: random_matrix(rng, n, dims.context),
        creative: random_matrix(rng, n, dims.creative),
    };
    let mut labels = BTreeMap::new();
    let mut present = BTreeMap::new();
    for t in Task::ALL {
        labels.insert(t, (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect());
        present.insert(t, vec![true; n]);
    }
    Batch {
        features,
        sources,
        labels,
        present,
    }
}

fn mixed_sources(rng: &mut ChaCha8Rng, n: usize) -> Vec<Source> {
    let mut s: Vec<Source> = (0..n).map(|_| if rng.random_bool(0.5) { Source::Promotion } else { Source::Ad }).collect();
    s[0] = Source::Promotion;
    s[n - 1] = Source::Ad;
    s
}

fn loss_at(params: &ModelParams, batch: &Batch, cfg: &LossConfig) -> (f64, Vec<bool>) {
    let mut tape = Tape::new();
    let traced = params.trace(&mut tape, &batch.features, NormMode::Train).unwrap();
    let (loss, _) = traced_loss(&mut tape, &traced, batch, cfg).unwrap();
    (tape.value(loss).get(0, 0), tape.relu_pattern())
}

fn grads_at(params: &ModelParams, batch: &Batch, cfg: &LossConfig) -> (Gradients, Vec<bool>) {
    let mut tape = Tape::new();
    let traced = params.trace(&mut tape, &batch.features, NormMode::Train).unwrap();
    let (loss, _) = traced_loss(&mut tape, &traced, batch, cfg).unwrap();
    (tape.backward(loss, &Matrix::scalar(1.0)).unwrap(), tape.relu_pattern())
}

fn set_coord(p: &mut ModelParams, name: &str, k: usize, v: f64) {
    let mut blocks = p.trainable_mut();
    let (_, m) = blocks.iter_mut().find(|(n, _)| n == name).unwrap();
    m.data_mut()[k] = v;
}

fn gradient_correctness() -> Verdict {
    let t0 = Instant::now();
    let spec = TaskSpec::five_task();
    let cfg = LossConfig::from_spec(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut checked, mut kinks, mut worst) = (0usize, 0usize, 0.0f64);
    let mut over = Vec::new();
    for i in 0..FD_INSTANCES {
        let mut params = ModelParams::init(&ModelConfig::default(), 1000 + i as u64).unwrap();
        let n = rng.random_range(4..10);
        let sources = mixed_sources(&mut rng, n);
        let batch = random_batch(&mut rng, &params.config().dims, sources);
        let (grads, pattern) = grads_at(&params, &batch, &cfg);
        let blocks: Vec<(String, Vec<f64>)> =
            params.trainable().into_iter().map(|(n, m)| (n, m.data().to_vec())).collect();
        for (name, values) in blocks {
            let analytic = grads.get(&name);
            for (k, &orig) in values.iter().enumerate() {
                set_coord(&mut params, &name, k, orig + FD_STEP);
                let (up, pu) = loss_at(&params, &batch, &cfg);
                set_coord(&mut params, &name, k, orig - FD_STEP);
                let (down, pd) = loss_at(&params, &batch, &cfg);
                set_coord(&mut params, &name, k, orig);
                if pu != pattern || pd != pattern {
                    kinks += 1;
                    continue;
                }
                let fd = (up - down) / (2.0 * FD_STEP);
                let an = analytic.map_or(0.0, |g| g.data()[k]);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(FD_REL_FLOOR);
                if rel >= FD_REL_TOL {
                    // Re-probe with a tenth of the step: truncation error should drop about 100x.
                    let h = FD_STEP / 10.0;
                    set_coord(&mut params, &name, k, orig + h);
                    let (up, _) = loss_at(&params, &batch, &cfg);
                    set_coord(&mut params, &name, k, orig - h);
                    let (down, _) = loss_at(&params, &batch, &cfg);
                    set_coord(&mut params, &name, k, orig);
                    let fd = (up - down) / (2.0 * h);
                    let rel_small = (fd - an).abs() / fd.abs().max(an.abs()).max(FD_REL_FLOOR);
                    over.push(format!("instance {i} {name}[{k}] {rel:.2e} -> {rel_small:.2e} at h/10"));
                }
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst < FD_REL_TOL && secs < FD_BUDGET_SECS,
        format!(
            "{checked} coordinates, {kinks} ReLU kinks skipped, max rel err {worst:.2e}, {secs:.1}s; over tolerance: [{}]",
            over.join("; ")
        ),
    )
}

fn directional_isolation() -> Verdict {
    let spec = TaskSpec::five_task();
    let cfg = LossConfig::from_spec(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let promo_only = [Task::PromotionStream, Task::Like, Task::Follow];
    let (mut leaks, mut encoder_moves) = (0, 0);
    for i in 0..ISOLATION_BATCHES {
        let params = ModelParams::init(&ModelConfig::default(), 2000 + i as u64).unwrap();
        let n = rng.random_range(2..32);
        let batch = random_batch(&mut rng, &params.config().dims, vec![Source::Ad; n]);
        let (g, _) = grads_at(&params, &batch, &cfg);
        for (name, _) in params.trainable() {
            if promo_only.iter().any(|t| name.starts_with(&ModelParams::tower_prefix(*t))) {
                let norm = g.get(&name).map_or(0.0, |m| m.data().iter().map(|x| x * x).sum::<f64>());
                if norm != 0.0 {
                    leaks += 1;
                }
            }
        }
        if g.norm_with_prefix("encoder.") > 0.0 {
            encoder_moves += 1;
        }
    }
    verdict(
        leaks == 0 && encoder_moves >= ISOLATION_MIN_ENCODER,
        format!("{leaks} nonzero promotion-tower blocks, encoder moved in {encoder_moves}/{ISOLATION_BATCHES}"),
    )
}

fn balanced_sampling() -> Verdict {
    let promo: Vec<usize> = (0..4000).collect();
    let ad: Vec<usize> = (4000..5000).collect();
    let count = |b: &[usize]| b.iter().filter(|&&r| r < 4000).count();
    let mut s = BalancedSampler::new(promo.clone(), ad.clone(), 64, 3).unwrap();
    let even = (0..1000).all(|_| {
        let b = s.next_batch();
        b.len() == 64 && count(&b) == 32
    });
    let mut a = BalancedSampler::new(promo.clone(), ad.clone(), 63, 3).unwrap();
    let mut b = BalancedSampler::new(promo, ad, 63, 3).unwrap();
    let mut alternates = true;
    let mut same = true;
    for k in 0..1000 {
        let (x, y) = (a.next_batch(), b.next_batch());
        let p = count(&x);
        let expected = if k % 2 == 0 { 32 } else { 31 };
        alternates &= x.len() == 63 && p == expected;
        same &= x == y;
    }
    verdict(
        even && alternates && same,
        format!("size 64 all 32/32: {even}; size 63 alternates 32/31: {alternates}; repeatable: {same}"),
    )
}

/// Precision at each positive's rank under (score desc, index asc), from pairwise comparisons.
fn ap_by_enumeration(scores: &[f64], labels: &[u8]) -> f64 {
    let n = scores.len();
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let rank: Vec<usize> = (0..n).map(|i| 1 + (0..n).filter(|&j| ahead(j, i)).count()).collect();
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    pos.iter()
        .map(|&i| {
            let hits = pos.iter().filter(|&&j| rank[j] <= rank[i]).count();
            hits as f64 / rank[i] as f64
        })
        .sum::<f64>()
        / pos.len() as f64
}

fn ap_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < AP_INSTANCES {
        let n = rng.random_range(1..=12);
        let ties = rng.random_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if ties { f64::from(rng.random_range(0..4)) / 4.0 } else { rng.random() })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        if !labels.contains(&1) {
            continue;
        }
        let got = average_precision(&scores, &labels).unwrap();
        worst = worst.max((got - ap_by_enumeration(&scores, &labels)).abs());
        done += 1;
    }
    let worked = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
    let worked_ok = (worked - 5.0 / 6.0).abs() < AP_TOL;
    verdict(
        worst < AP_TOL && worked_ok,
        format!("max |diff| {worst:.1e} over {AP_INSTANCES} instances; worked example {worked:.6}"),
    )
}

#[derive(Clone)]
struct SeedRun {
    scores: BTreeMap<String, ArmScores>,
    low_tiers: Option<f64>,
    high_tiers: Option<f64>,
}

/// Trains the five arms per seed and replays the joint model against the baseline.
fn table1_and_replay() -> (Vec<SeedRun>, f64) {
    let t0 = Instant::now();
    let cfg = AblationConfig::table1((0..TABLE1_SEEDS).collect());
    let joint_name = AblationArm::joint().name;
    let base_name = AblationArm::baseline().name;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let data = cfg.data.generate(seed).unwrap();
        let mut kept: BTreeMap<String, ModelParams> = BTreeMap::new();
        let result = run_seed(&cfg, &data, |arm, p| {
            if arm.name == joint_name || arm.name == base_name {
                kept.insert(arm.name.clone(), p.clone());
            }
        });
        let scores = result
            .arms
            .iter()
            .filter_map(|(n, o)| o.scores().map(|s| (n.clone(), *s)))
            .collect();
        let (low_tiers, high_tiers) = match (kept.get(&base_name), kept.get(&joint_name)) {
            (Some(b), Some(j)) => {
                let r = run_replay(
                    &data.world,
                    &ReplayConfig {
                        seed,
                        ..ReplayConfig::default()
                    },
                    &ModelScorer {
                        name: base_name.clone(),
                        params: b,
                        head: Task::PromotionStream,
                    },
                    &ModelScorer {
                        name: joint_name.clone(),
                        params: j,
                        head: Task::AdStream,
                    },
                )
                .unwrap();
                (tier_gain(&r, 0..3), tier_gain(&r, 3..6))
            }
            _ => (None, None),
        };
        runs.push(SeedRun {
            scores,
            low_tiers,
            high_tiers,
        });
    }
    (runs, t0.elapsed().as_secs_f64())
}

fn table1_directional(runs: &[SeedRun], secs: f64) -> Verdict {
    let get = |r: &SeedRun, arm: AblationArm| r.scores.get(&arm.name).copied();
    let count = |f: &dyn Fn(&SeedRun) -> Option<bool>| runs.iter().filter(|r| f(r) == Some(true)).count();
    let ads = |s: ArmScores| s.ads_ap;
    let promo = |s: ArmScores| s.promotions_ap;
    let a = count(&|r| Some(ads(get(r, AblationArm::joint())?)? > ads(get(r, AblationArm::ads_stream_only())?)?));
    let b = count(&|r| {
        Some(ads(get(r, AblationArm::ads_stream_with_ancillary())?)? > ads(get(r, AblationArm::ads_stream_only())?)?)
    });
    let c = count(&|r| {
        let j = promo(get(r, AblationArm::joint())?)?;
        Some(
            promo(get(r, AblationArm::ads_stream_only())?)? < j
                && promo(get(r, AblationArm::ads_stream_with_ancillary())?)? < j,
        )
    });
    let d = count(&|r| Some(promo(get(r, AblationArm::joint())?)? >= promo(get(r, AblationArm::promo_stream_only())?)?));
    let n = runs.len();
    verdict(
        a >= 8 && b >= 8 && c >= 9 && d >= 7 && secs < TABLE1_BUDGET_SECS,
        format!("(a) {a}/{n} (b) {b}/{n} (c) {c}/{n} (d) {d}/{n}; {secs:.0}s including replays"),
    )
}

fn tier_trend(runs: &[SeedRun]) -> Verdict {
    let wins = runs
        .iter()
        .filter(|r| matches!((r.low_tiers, r.high_tiers), (Some(l), Some(h)) if h > l))
        .count();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| {
            let f = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:+.1}"));
            format!("{}/{}", f(r.low_tiers), f(r.high_tiers))
        })
        .collect();
    verdict(
        wins >= 7,
        format!("tiers 3-5 ahead in {wins}/{} seeds (tiers 0-2 / 3-5 i2s %: {})", runs.len(), detail.join(" ")),
    )
}

fn metric_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = true;
    for _ in 0..200 {
        let n_shows = rng.random_range(8..40u32);
        let catalog: Vec<CatalogRow> = (0..n_shows)
            .map(|i| CatalogRow {
                show_id: i,
                tier: (i % 8) as u8,
                hours_30d: 1.0,
                lifetime_streams: rng.random_range(0..20_000),
                popularity: 1.0 / f64::from(n_shows),
            })
            .collect();
        let served: Vec<ServedImpression> = (0..rng.random_range(1..500))
            .map(|_| ServedImpression {
                show_id: rng.random_range(0..n_shows),
                streamed: rng.random_bool(0.3),
                clicked: rng.random_bool(0.2),
                spend_micros: rng.random_range(1..50u64) * 1_000_000,
            })
            .collect();
        let m = online_metrics(&served, &catalog).unwrap();
        for (_, c) in &m.segments {
            if let Some(r) = c.ecps_exact() {
                ok &= *r.numer() * c.streams == *r.denom() * c.spend_micros;
                let spend = c.spend_micros as f64 / 1e6;
                ok &= (c.ecps().unwrap() * c.streams as f64 - spend).abs() <= 1e-12 * spend;
            }
            ok &= c.i2s().is_none_or(|v| (0.0..=1.0).contains(&v));
            ok &= c.ctr().is_none_or(|v| (0.0..=1.0).contains(&v));
        }
        let all = m.get(Segment::All);
        let tiers: Vec<_> = (0..8).map(|t| m.get(Segment::Tier(t))).collect();
        ok &= tiers.iter().map(|c| c.impressions).sum::<u64>() == all.impressions;
        ok &= tiers.iter().map(|c| c.streams).sum::<u64>() == all.streams;
        ok &= tiers.iter().map(|c| c.clicks).sum::<u64>() == all.clicks;
        ok &= tiers.iter().map(|c| c.spend_micros).sum::<u64>() == all.spend_micros;
    }
    verdict(ok, "200 random integer-spend fixtures")
}

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_castmtl"))
        .args(args)
        .output()
        .is_ok_and(|o| o.status.success())
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let root = tmp.path().join(name);
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let (data, model, report) = (root.join("data"), root.join("model.cmtl"), root.join("report.json"));
        let ok = cli(&[
            "generate", "--out", &s(&data), "--seed", "21", "--n-users", "2000", "--n-shows", "100", "--n-promo",
            "4000", "--n-ad", "1000",
        ]) && cli(&["train", "--data", &s(&data), "--out", &s(&model), "--seed", "21", "--epochs", "2", "--batch-size", "64"])
            && cli(&[
                "eval",
                "--model",
                &s(&model),
                "--data",
                &s(&data.join("test.jsonl")),
                "--catalog",
                &s(&data.join("catalog.jsonl")),
                "--out",
                &s(&report),
                "--seed",
                "21",
            ]);
        if !ok {
            return verdict(false, format!("{name} pipeline run failed"));
        }
        runs.push((std::fs::read(&model).unwrap(), std::fs::read(&report).unwrap()));
    }
    verdict(
        runs[0] == runs[1],
        format!("model {} bytes, report {} bytes", runs[0].0.len(), runs[0].1.len()),
    )
}

fn lambda_linearity() -> Verdict {
    let spec = TaskSpec::five_task();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for i in 0..20 {
        let params = ModelParams::init(&ModelConfig::default(), 9000 + i).unwrap();
        let sources = mixed_sources(&mut rng, 16);
        let batch = random_batch(&mut rng, &params.config().dims, sources);
        let lam = rng.random_range(0.1..3.0);
        let mut cfg = LossConfig::from_spec(&spec);
        for w in cfg.weights.values_mut() {
            *w = 0.0;
        }
        cfg.weights.insert(Task::AdStream, lam);
        let (g1, _) = grads_at(&params, &batch, &cfg);
        cfg.weights.insert(Task::AdStream, 2.0 * lam);
        let (g2, _) = grads_at(&params, &batch, &cfg);
        for (name, a) in g1.iter() {
            let b = g2.get(name).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                if *x == 0.0 && *y == 0.0 {
                    continue;
                }
                worst = worst.max((y - 2.0 * x).abs() / (2.0 * x).abs());
                coords += 1;
            }
        }
    }
    verdict(worst < LAMBDA_TOL, format!("{coords} coordinates, max rel err {worst:.1e}"))
}

fn serialization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = ModelParams::init(&ModelConfig::default(), 10).unwrap();
    let dims = params.config().dims;
    let bn = params.norm_mut().unwrap();
    bn.running_mean = random_matrix(&mut rng, 1, bn.running_mean.cols());
    let x = FeatureBatch {
        user: random_matrix(&mut rng, 1000, dims.user),
        content: random_matrix(&mut rng, 1000, dims.content),
        context: random_matrix(&mut rng, 1000, dims.context),
        creative: random_matrix(&mut rng, 1000, dims.creative),
    };
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.cmtl");
    params.save(&path).unwrap();
    let loaded = ModelParams::load(&path).unwrap();
    let (a, b) = (params.predict_all(&x).unwrap(), loaded.predict_all(&x).unwrap());
    let same = Task::ALL.iter().all(|t| {
        a[t].len() == 1000 && a[t].iter().zip(&b[t]).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    verdict(same && loaded == params, "1000 rows x 5 heads compared bitwise")
}

fn main() {
    // ACCEPTANCE_ONLY=1,7 runs a subset.
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut failed = 0;
    let mut report = |n: usize, name: &str, check: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let v = check();
        println!("{} {n:>2}. {name}: {}", if v.ok { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.ok);
    };
    report(1, "gradient correctness", &mut gradient_correctness);
    report(2, "directional-transfer isolation", &mut directional_isolation);
    report(3, "balanced sampling", &mut balanced_sampling);
    report(4, "AP oracle equivalence", &mut ap_oracle);
    let mut runs = None;
    let mut shared = || runs.get_or_insert_with(table1_and_replay).clone();
    report(5, "ablation directional reproduction", &mut || {
        let (r, secs) = shared();
        table1_directional(&r, secs)
    });
    report(6, "cold-start tier trend", &mut || tier_trend(&shared().0));
    report(7, "metric identities", &mut metric_identities);
    report(8, "pipeline determinism", &mut determinism);
    report(9, "loss-weight linearity", &mut lambda_linearity);
    report(10, "serialization round trip", &mut serialization);
    println!("{failed} acceptance criteria failed");
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
