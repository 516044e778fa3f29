//! Synthetic users, shows and impression logs driven by a shared latent affinity.
//!
//! Every outcome in both channels is a logistic function of the same user-show affinity
//! `a = <u, c>/sqrt(d) + user bias + show bias`, so promotion logs carry information about ad
//! outcomes. Observed content features get noisier as shows get less popular.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CatalogRow, DataError, ImpressionRecord};
use crate::model::{FeatureDims, Source, Task};
use crate::numerics::sigmoid;

pub const N_TIERS: usize = 8;
/// Shows with fewer lifetime streams than this are "less-streamed".
pub const LESS_STREAMED_THRESHOLD: u64 = 5_000;
pub const N_GENRES: usize = 6;
pub const N_TIME_BUCKETS: usize = 4;
pub const N_SURFACES: usize = 4;
/// Creative formats: three ad formats (audio, video, display) then three promotion formats
/// (shelf, banner, card).
pub const N_FORMATS: usize = 6;
pub const AD_FORMATS: [usize; 3] = [0, 1, 2];
pub const PROMO_FORMATS: [usize; 3] = [3, 4, 5];
pub const N_SLOTS: usize = 2;
const USER_AGGREGATES: usize = 8;
const CONTENT_EXTRAS: usize = N_GENRES + 2;

/// Outcome model coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeParams {
    pub stream_scale: f64,
    pub stream_bias: f64,
    pub click_scale: f64,
    pub click_bias: f64,
    /// Shared affinity scale for like and follow.
    pub engage_scale: f64,
    pub like_bias: f64,
    pub follow_bias: f64,
    pub user_bias_sd: f64,
    pub show_bias_sd: f64,
    /// Stream-logit offset per creative format; this is the channel offset.
    pub format_offsets: [f64; N_FORMATS],
    /// Extra ad stream-logit per ad format, scaled by show novelty (tier / 7).
    pub ad_novelty_lift: [f64; 3],
    pub surface_offsets: [f64; N_SURFACES],
    pub time_offsets: [f64; N_TIME_BUCKETS],
}

impl Default for OutcomeParams {
    fn default() -> Self {
        Self {
            stream_scale: 1.2,
            stream_bias: -4.0,
            click_scale: 1.1,
            click_bias: -3.0,
            engage_scale: 1.3,
            like_bias: -3.5,
            follow_bias: -4.0,
            user_bias_sd: 0.5,
            show_bias_sd: 0.5,
            format_offsets: [0.0, 0.3, -0.4, 0.3, -0.3, 0.0],
            ad_novelty_lift: [0.0, 1.0, -0.6],
            surface_offsets: [0.1, 0.0, -0.1, 0.2],
            time_offsets: [0.0, 0.1, -0.1, 0.05],
        }
    }
}

impl OutcomeParams {
    /// No channel, format, surface or time effects.
    pub fn without_offsets(mut self) -> Self {
        self.format_offsets = [0.0; N_FORMATS];
        self.ad_novelty_lift = [0.0; 3];
        self.surface_offsets = [0.0; N_SURFACES];
        self.time_offsets = [0.0; N_TIME_BUCKETS];
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_shows: usize,
    pub latent_dim: usize,
    pub zipf_exponent: f64,
    /// Noise on the observed user latent.
    pub user_noise: f64,
    /// Content-feature noise is `content_noise_base + content_noise_per_tier * tier`.
    pub content_noise_base: f64,
    pub content_noise_per_tier: f64,
    pub outcome: OutcomeParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 50_000,
            n_shows: 2_000,
            latent_dim: 8,
            zipf_exponent: 1.1,
            user_noise: 0.3,
            content_noise_base: 0.2,
            content_noise_per_tier: 0.15,
            outcome: OutcomeParams::default(),
        }
    }
}

impl WorldConfig {
    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            user: self.latent_dim + USER_AGGREGATES,
            content: self.latent_dim + CONTENT_EXTRAS,
            context: N_TIME_BUCKETS + N_SURFACES,
            creative: N_FORMATS + N_SLOTS,
        }
    }

    pub fn content_noise(&self, tier: u8) -> f64 {
        self.content_noise_base + self.content_noise_per_tier * f64::from(tier)
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.latent_dim < 1 {
            return Err(DataError::Config("latent_dim must be >= 1".into()));
        }
        if self.n_users == 0 {
            return Err(DataError::Config("n_users must be positive".into()));
        }
        if self.n_shows < N_TIERS {
            return Err(DataError::Config(format!(
                "n_shows must be at least {N_TIERS} so every tier is populated"
            )));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent > 0.0) {
            return Err(DataError::Config("zipf_exponent must be positive".into()));
        }
        if self.content_noise_base < 0.0 || self.content_noise_per_tier < 0.0 || self.user_noise < 0.0 {
            return Err(DataError::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    pub n_promo: usize,
    pub n_ad: usize,
    pub start_ts: i64,
    pub days: u32,
    /// Promotion shows are sampled proportional to `popularity^promo_popularity_power`.
    pub promo_popularity_power: f64,
    /// Fixed price of one ad impression, in currency units.
    pub ad_cost: f64,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            n_promo: 400_000,
            n_ad: 100_000,
            start_ts: 1_700_000_000,
            days: 30,
            promo_popularity_power: 0.5,
            ad_cost: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct User {
    pub latent: Vec<f64>,
    pub bias: f64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Show {
    pub show_id: u32,
    pub latent: Vec<f64>,
    pub bias: f64,
    pub genre: usize,
    /// Normalized Zipf weight; sums to 1 over the catalog.
    pub popularity: f64,
    pub hours_30d: f64,
    /// 0 is the most-streamed tier.
    pub tier: u8,
    pub lifetime_streams: u64,
    pub noise_sd: f64,
    pub features: Vec<f64>,
}

impl Show {
    pub fn less_streamed(&self) -> bool {
        self.lifetime_streams < LESS_STREAMED_THRESHOLD
    }

    /// 0 for tier 0, 1 for the last tier.
    pub fn novelty(&self) -> f64 {
        f64::from(self.tier) / (N_TIERS - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShowCatalog {
    pub shows: Vec<Show>,
}

impl ShowCatalog {
    pub fn len(&self) -> usize {
        self.shows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shows.is_empty()
    }

    pub fn get(&self, show_id: u32) -> Option<&Show> {
        self.shows.get(show_id as usize)
    }

    pub fn rows(&self) -> Vec<CatalogRow> {
        self.shows
            .iter()
            .map(|s| CatalogRow {
                show_id: s.show_id,
                tier: s.tier,
                hours_30d: s.hours_30d,
                lifetime_streams: s.lifetime_streams,
                popularity: s.popularity,
            })
            .collect()
    }

    pub fn tier_members(&self, tier: u8) -> Vec<u32> {
        self.shows
            .iter()
            .filter(|s| s.tier == tier)
            .map(|s| s.show_id)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Context {
    pub time_bucket: usize,
    pub surface: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Creative {
    pub format: usize,
    pub slot: usize,
}

/// One (user, show, context, creative) exposure in a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exposure {
    pub source: Source,
    pub user: u32,
    pub show: u32,
    pub context: Context,
    pub creative: Creative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeProbs {
    pub stream: f64,
    pub click: f64,
    pub like: f64,
    pub follow: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub users: Vec<User>,
    pub catalog: ShowCatalog,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn one_hot(out: &mut Vec<f64>, n: usize, hot: usize) {
    out.extend((0..n).map(|i| if i == hot { 1.0 } else { 0.0 }));
}

impl World {
    pub fn generate(config: &WorldConfig, seed: u64) -> Result<Self, DataError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.latent_dim;
        let o = &config.outcome;

        let users = (0..config.n_users)
            .map(|_| {
                let latent = normals(&mut rng, d);
                let bias = o.user_bias_sd * rng.sample::<f64, _>(StandardNormal);
                let mut features: Vec<f64> = latent
                    .iter()
                    .map(|v| v + config.user_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                features.push(bias + config.user_noise * rng.sample::<f64, _>(StandardNormal));
                features.extend(normals(&mut rng, USER_AGGREGATES - 1));
                User {
                    latent,
                    bias,
                    features,
                }
            })
            .collect();

        let n = config.n_shows;
        let mut ranks: Vec<usize> = (1..=n).collect();
        ranks.shuffle(&mut rng);
        let raw: Vec<f64> = ranks
            .iter()
            .map(|&r| (r as f64).powf(-config.zipf_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        let total_hours = 1_000.0 * n as f64;
        let mut shows: Vec<Show> = raw
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let latent = normals(&mut rng, d);
                let bias = o.show_bias_sd * rng.sample::<f64, _>(StandardNormal);
                let genre_span = d.min(N_GENRES);
                let genre = (0..genre_span)
                    .max_by(|&a, &b| latent[a].total_cmp(&latent[b]))
                    .unwrap_or(0);
                let popularity = w / total;
                let hours_30d =
                    total_hours * popularity * (0.1 * rng.sample::<f64, _>(StandardNormal)).exp();
                Show {
                    show_id: i as u32,
                    latent,
                    bias,
                    genre,
                    popularity,
                    hours_30d,
                    tier: 0,
                    lifetime_streams: 0,
                    noise_sd: 0.0,
                    features: Vec::new(),
                }
            })
            .collect();

        // tiers: equal-count listening-hours quantiles, most hours first
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| shows[b].hours_30d.total_cmp(&shows[a].hours_30d).then(a.cmp(&b)));
        for (rank, &i) in order.iter().enumerate() {
            shows[i].tier = (rank * N_TIERS / n) as u8;
        }
        // lifetime streams scale with hours, pinned so the less-streamed cut falls between
        // tiers 2 and 3
        let min_hours_tier2 = shows
            .iter()
            .filter(|s| s.tier == 2)
            .map(|s| s.hours_30d)
            .fold(f64::INFINITY, f64::min);
        let max_hours_tier3 = shows
            .iter()
            .filter(|s| s.tier == 3)
            .map(|s| s.hours_30d)
            .fold(0.0, f64::max);
        let pivot = (min_hours_tier2 * max_hours_tier3).sqrt();
        let log_hours: Vec<f64> = shows.iter().map(|s| s.hours_30d.ln()).collect();
        let mean_lh = log_hours.iter().sum::<f64>() / n as f64;
        let sd_lh = (log_hours.iter().map(|v| (v - mean_lh).powi(2)).sum::<f64>() / n as f64)
            .sqrt()
            .max(1e-12);
        for (s, lh) in shows.iter_mut().zip(&log_hours) {
            s.lifetime_streams =
                (LESS_STREAMED_THRESHOLD as f64 * s.hours_30d / pivot).floor() as u64;
            s.noise_sd = config.content_noise(s.tier);
            let mut f: Vec<f64> = s
                .latent
                .iter()
                .map(|v| v + s.noise_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            one_hot(&mut f, N_GENRES, s.genre);
            f.push((lh - mean_lh) / sd_lh);
            f.push(s.bias + s.noise_sd * rng.sample::<f64, _>(StandardNormal));
            s.features = f;
        }

        Ok(Self {
            config: config.clone(),
            users,
            catalog: ShowCatalog { shows },
        })
    }

    pub fn feature_dims(&self) -> FeatureDims {
        self.config.feature_dims()
    }

    pub fn affinity(&self, user: u32, show: u32) -> f64 {
        let u = &self.users[user as usize];
        let s = &self.catalog.shows[show as usize];
        let dot: f64 = u.latent.iter().zip(&s.latent).map(|(a, b)| a * b).sum();
        dot / (self.config.latent_dim as f64).sqrt() + u.bias + s.bias
    }

    /// True outcome probabilities of an exposure.
    pub fn outcome_probabilities(&self, e: &Exposure) -> OutcomeProbs {
        let o = &self.config.outcome;
        let a = self.affinity(e.user, e.show);
        let ctx = o.surface_offsets[e.context.surface] + o.time_offsets[e.context.time_bucket];
        let mut stream_logit =
            o.stream_scale * a + o.stream_bias + o.format_offsets[e.creative.format] + ctx;
        if e.source == Source::Ad {
            if let Some(k) = AD_FORMATS.iter().position(|&f| f == e.creative.format) {
                stream_logit += o.ad_novelty_lift[k] * self.catalog.shows[e.show as usize].novelty();
            }
        }
        OutcomeProbs {
            stream: sigmoid(stream_logit),
            click: sigmoid(o.click_scale * a + o.click_bias + ctx),
            like: sigmoid(o.engage_scale * a + o.like_bias),
            follow: sigmoid(o.engage_scale * a + o.follow_bias),
        }
    }

    /// Observable features: `(user, content, context, creative)`.
    pub fn features(&self, e: &Exposure) -> [Vec<f64>; 4] {
        let user = self.users[e.user as usize].features.clone();
        let content = self.catalog.shows[e.show as usize].features.clone();
        let mut context = Vec::with_capacity(N_TIME_BUCKETS + N_SURFACES);
        one_hot(&mut context, N_TIME_BUCKETS, e.context.time_bucket);
        one_hot(&mut context, N_SURFACES, e.context.surface);
        let mut creative = Vec::with_capacity(N_FORMATS + N_SLOTS);
        one_hot(&mut creative, N_FORMATS, e.creative.format);
        one_hot(&mut creative, N_SLOTS, e.creative.slot);
        [user, content, context, creative]
    }

    /// Ad-channel show sampler (proportional to popularity).
    pub fn ad_show_sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(self.catalog.shows.iter().map(|s| s.popularity))
            .expect("popularity weights are positive")
    }

    fn promo_show_sampler(&self, power: f64) -> WeightedIndex<f64> {
        WeightedIndex::new(self.catalog.shows.iter().map(|s| s.popularity.powf(power)))
            .expect("popularity weights are positive")
    }

    pub fn time_bucket(ts: i64) -> usize {
        (ts.rem_euclid(86_400) / (86_400 / N_TIME_BUCKETS as i64)) as usize
    }

    /// Samples `n_promo` promotion and `n_ad` ad impressions, ordered by timestamp.
    pub fn simulate_logs(
        &self,
        cfg: &LogConfig,
        seed: u64,
    ) -> Result<Vec<ImpressionRecord>, DataError> {
        if cfg.days == 0 {
            return Err(DataError::Config("days must be positive".into()));
        }
        if !(cfg.ad_cost.is_finite() && cfg.ad_cost >= 0.0) {
            return Err(DataError::Config("ad_cost must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ad_shows = self.ad_show_sampler();
        let promo_shows = self.promo_show_sampler(cfg.promo_popularity_power);
        let span = i64::from(cfg.days) * 86_400;
        let mut drafts: Vec<(i64, usize, ImpressionRecord)> =
            Vec::with_capacity(cfg.n_promo + cfg.n_ad);
        for i in 0..cfg.n_promo + cfg.n_ad {
            let source = if i < cfg.n_promo {
                Source::Promotion
            } else {
                Source::Ad
            };
            let ts = cfg.start_ts + rng.random_range(0..span);
            let user = rng.random_range(0..self.users.len()) as u32;
            let show = match source {
                Source::Promotion => promo_shows.sample(&mut rng),
                Source::Ad => ad_shows.sample(&mut rng),
            } as u32;
            let formats = match source {
                Source::Promotion => PROMO_FORMATS,
                Source::Ad => AD_FORMATS,
            };
            let e = Exposure {
                source,
                user,
                show,
                context: Context {
                    time_bucket: Self::time_bucket(ts),
                    surface: rng.random_range(0..N_SURFACES),
                },
                creative: Creative {
                    format: formats[rng.random_range(0..formats.len())],
                    slot: rng.random_range(0..N_SLOTS),
                },
            };
            let p = self.outcome_probabilities(&e);
            let stream = u8::from(rng.random::<f64>() < p.stream);
            let click = u8::from(rng.random::<f64>() < p.click);
            let like = u8::from(rng.random::<f64>() < p.like);
            let follow = u8::from(rng.random::<f64>() < p.follow);
            let [f_user, f_content, f_context, f_creative] = self.features(&e);
            let labels: BTreeMap<Task, u8> = [
                (Task::PromotionStream, stream),
                (Task::AdStream, stream),
                (Task::Click, click),
                (Task::Like, like),
                (Task::Follow, follow),
            ]
            .into();
            let label_present = Task::ALL.iter().map(|&t| (t, true)).collect();
            drafts.push((
                ts,
                i,
                ImpressionRecord {
                    id: 0,
                    ts,
                    source,
                    user_id: user,
                    show_id: show,
                    f_user,
                    f_content,
                    f_context,
                    f_creative,
                    labels,
                    label_present,
                    cost: if source == Source::Ad { cfg.ad_cost } else { 0.0 },
                },
            ));
        }
        drafts.sort_by_key(|(ts, i, _)| (*ts, *i));
        Ok(drafts
            .into_iter()
            .enumerate()
            .map(|(id, (_, _, mut r))| {
                r.id = id as u64;
                r
            })
            .collect())
    }

    /// Recovers the exposure behind a generated record from its one-hot encodings.
    pub fn exposure_of(&self, r: &ImpressionRecord) -> Exposure {
        let hot = |v: &[f64]| v.iter().position(|&x| x == 1.0).unwrap_or(0);
        Exposure {
            source: r.source,
            user: r.user_id,
            show: r.show_id,
            context: Context {
                time_bucket: hot(&r.f_context[..N_TIME_BUCKETS]),
                surface: hot(&r.f_context[N_TIME_BUCKETS..]),
            },
            creative: Creative {
                format: hot(&r.f_creative[..N_FORMATS]),
                slot: hot(&r.f_creative[N_FORMATS..]),
            },
        }
    }
}
