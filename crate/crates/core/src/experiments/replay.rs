use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::dataio::{
    Context, Creative, Exposure, World, AD_FORMATS, N_SLOTS, N_SURFACES, N_TIME_BUCKETS,
};
use crate::evaluation::{online_metrics, relative_change, to_micros, OnlineMetrics, Segment, SegmentMetrics, ServedImpression};
use crate::model::{FeatureBatch, ModelParams, Source, Task};
use crate::numerics::{Matrix, NormMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    pub n_opportunities: usize,
    /// Candidates per opportunity.
    pub pool_size: usize,
    /// Currency units per served impression.
    pub cost_per_impression: f64,
    pub seed: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            n_opportunities: 100_000,
            pool_size: 40,
            cost_per_impression: 0.02,
            seed: 0,
        }
    }
}

/// One ad slot to fill: a user in a context, with candidate (show, creative) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Opportunity {
    pub index: usize,
    pub user: u32,
    pub context: Context,
    pub candidates: Vec<(u32, Creative)>,
}

impl Opportunity {
    pub fn exposures(&self) -> impl Iterator<Item = Exposure> + '_ {
        self.candidates.iter().map(|&(show, creative)| Exposure {
            source: Source::Ad,
            user: self.user,
            show,
            context: self.context,
            creative,
        })
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.index as u64).to_le_bytes());
        h.update(self.user.to_le_bytes());
        h.update((self.context.time_bucket as u64).to_le_bytes());
        h.update((self.context.surface as u64).to_le_bytes());
        for (show, c) in &self.candidates {
            h.update(show.to_le_bytes());
            h.update((c.format as u64).to_le_bytes());
            h.update((c.slot as u64).to_le_bytes());
        }
    }
}

/// Deterministic opportunity stream. Candidate shows are drawn uniformly from the catalog so
/// every tier is on offer.
pub fn opportunities(world: &World, cfg: &ReplayConfig) -> Result<Vec<Opportunity>, ExperimentError> {
    if cfg.pool_size == 0 {
        return Err(ExperimentError::Config("candidate pool is empty".into()));
    }
    if world.catalog.is_empty() || world.users.is_empty() {
        return Err(ExperimentError::Config("world has no users or shows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_shows = world.catalog.len() as u32;
    Ok((0..cfg.n_opportunities)
        .map(|index| {
            let user = rng.random_range(0..world.users.len() as u32);
            let context = Context {
                time_bucket: rng.random_range(0..N_TIME_BUCKETS),
                surface: rng.random_range(0..N_SURFACES),
            };
            let candidates = (0..cfg.pool_size)
                .map(|_| {
                    let show = rng.random_range(0..n_shows);
                    let creative = Creative {
                        format: AD_FORMATS[rng.random_range(0..AD_FORMATS.len())],
                        slot: rng.random_range(0..N_SLOTS),
                    };
                    (show, creative)
                })
                .collect();
            Opportunity {
                index,
                user,
                context,
                candidates,
            }
        })
        .collect())
}

/// Ranks candidates; higher is better.
pub trait Scorer {
    fn name(&self) -> &str;
    fn score(&self, world: &World, opp: &Opportunity) -> Result<Vec<f64>, ExperimentError>;
}

/// A trained model scoring with one of its heads.
pub struct ModelScorer<'a> {
    pub name: String,
    pub params: &'a ModelParams,
    pub head: Task,
}

impl Scorer for ModelScorer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, world: &World, opp: &Opportunity) -> Result<Vec<f64>, ExperimentError> {
        let dims = world.feature_dims();
        let n = opp.candidates.len();
        let mut groups: [Vec<f64>; 4] = Default::default();
        for e in opp.exposures() {
            for (g, f) in groups.iter_mut().zip(world.features(&e)) {
                g.extend(f);
            }
        }
        let [user, content, context, creative] = groups;
        let x = FeatureBatch {
            user: Matrix::from_vec(n, dims.user, user).map_err(crate::model::ModelError::from)?,
            content: Matrix::from_vec(n, dims.content, content).map_err(crate::model::ModelError::from)?,
            context: Matrix::from_vec(n, dims.context, context).map_err(crate::model::ModelError::from)?,
            creative: Matrix::from_vec(n, dims.creative, creative).map_err(crate::model::ModelError::from)?,
        };
        let z = self.params.encode(&x, NormMode::Infer)?;
        Ok(self.params.predict_task(&z, self.head)?)
    }
}

/// Scores with the generator's true stream probabilities.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(&self, world: &World, opp: &Opportunity) -> Result<Vec<f64>, ExperimentError> {
        Ok(opp
            .exposures()
            .map(|e| world.outcome_probabilities(&e).stream)
            .collect())
    }
}

/// Uniform random scores, seeded per opportunity.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn name(&self) -> &str {
        "random"
    }

    fn score(&self, _world: &World, opp: &Opportunity) -> Result<Vec<f64>, ExperimentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (opp.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok((0..opp.candidates.len()).map(|_| rng.random()).collect())
    }
}

/// Uniforms for the stream and click draws of candidate `k` at opportunity `index`. They do not
/// depend on the arm, so two arms serving the same candidate see the same outcome.
fn outcome_uniforms(seed: u64, index: usize, k: usize) -> (f64, f64) {
    let mut h = Sha256::new();
    h.update(b"outcome");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    h.update((k as u64).to_le_bytes());
    let d = h.finalize();
    let mut seed_bytes = [0u8; 32];
    seed_bytes.copy_from_slice(&d);
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);
    (rng.random(), rng.random())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReplay {
    pub name: String,
    /// SHA-256 of the opportunity stream this arm was served.
    pub checksum: String,
    pub segments: Vec<SegmentMetrics>,
    /// Index of the chosen candidate per opportunity.
    #[serde(skip)]
    pub picks: Vec<usize>,
    #[serde(skip)]
    pub metrics: Option<OnlineMetrics>,
}

impl ArmReplay {
    pub fn segment(&self, s: Segment) -> Option<&SegmentMetrics> {
        self.segments.iter().find(|m| m.segment == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDelta {
    pub segment: Segment,
    /// Relative changes in percent, candidate against baseline.
    pub i2s: Option<f64>,
    pub ecps: Option<f64>,
    pub ctr: Option<f64>,
    pub streams: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub config: ReplayConfig,
    pub baseline: ArmReplay,
    pub candidate: ArmReplay,
    pub deltas: Vec<SegmentDelta>,
}

/// Serves every opportunity with `scorer`'s top candidate (earliest index among ties).
pub fn replay_arm(world: &World, cfg: &ReplayConfig, scorer: &dyn Scorer) -> Result<ArmReplay, ExperimentError> {
    let opps = opportunities(world, cfg)?;
    let mut hasher = Sha256::new();
    let cost = to_micros(cfg.cost_per_impression);
    let mut served = Vec::with_capacity(opps.len());
    let mut picks = Vec::with_capacity(opps.len());
    for opp in &opps {
        opp.hash_into(&mut hasher);
        let scores = scorer.score(world, opp)?;
        if scores.len() != opp.candidates.len() {
            return Err(ExperimentError::Config(format!(
                "scorer {} returned {} scores for {} candidates",
                scorer.name(),
                scores.len(),
                opp.candidates.len()
            )));
        }
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (k, s)| if *s > scores[b] { k } else { b });
        let e = opp.exposures().nth(best).expect("index in range");
        let p = world.outcome_probabilities(&e);
        let (us, uc) = outcome_uniforms(cfg.seed, opp.index, best);
        served.push(ServedImpression {
            show_id: e.show,
            streamed: us < p.stream,
            clicked: uc < p.click,
            spend_micros: cost,
        });
        picks.push(best);
    }
    let catalog = world.catalog.rows();
    let metrics = online_metrics(&served, &catalog)?;
    Ok(ArmReplay {
        name: scorer.name().to_string(),
        checksum: hex::encode(hasher.finalize()),
        segments: metrics.rows(),
        picks,
        metrics: Some(metrics),
    })
}

fn rel(c: Option<f64>, b: Option<f64>) -> Option<f64> {
    relative_change(c?, b?).ok()
}

pub fn deltas(baseline: &ArmReplay, candidate: &ArmReplay) -> Vec<SegmentDelta> {
    baseline
        .segments
        .iter()
        .filter_map(|b| {
            let c = candidate.segment(b.segment)?;
            Some(SegmentDelta {
                segment: b.segment,
                i2s: rel(c.i2s, b.i2s),
                ecps: rel(c.ecps, b.ecps),
                ctr: rel(c.ctr, b.ctr),
                streams: rel(Some(c.streams as f64), Some(b.streams as f64)),
            })
        })
        .collect()
}

/// Paired replay of two arms over one opportunity stream.
pub fn run_replay(
    world: &World,
    cfg: &ReplayConfig,
    baseline: &dyn Scorer,
    candidate: &dyn Scorer,
) -> Result<ReplayResult, ExperimentError> {
    let b = replay_arm(world, cfg, baseline)?;
    let c = replay_arm(world, cfg, candidate)?;
    if b.checksum != c.checksum {
        return Err(ExperimentError::Config(format!(
            "arms were served different opportunity streams ({} vs {})",
            b.checksum, c.checksum
        )));
    }
    let deltas = deltas(&b, &c);
    Ok(ReplayResult {
        config: cfg.clone(),
        baseline: b,
        candidate: c,
        deltas,
    })
}

/// Mean relative i2s change over `tiers`; `None` if any tier has no defined delta.
pub fn tier_gain(r: &ReplayResult, tiers: std::ops::Range<u8>) -> Option<f64> {
    let n = tiers.len();
    let mut sum = 0.0;
    for t in tiers {
        sum += r.deltas.iter().find(|d| d.segment == Segment::Tier(t))?.i2s?;
    }
    Some(sum / n as f64)
}
