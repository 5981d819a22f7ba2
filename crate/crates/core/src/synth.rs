//! Synthetic long-tail interaction corpus.
//!
//! Items and users live in a shared Gaussian-mixture latent space; one
//! mixture component is one category. Item popularity and user activity
//! follow Zipf laws over randomly permuted ranks. Each event picks a user by
//! activity, exposes an item drawn from either the global popularity law or
//! the popularity law restricted to the user's home category, and clicks
//! with probability
//!
//! ```text
//! sigmoid(a * <u, i> / dim + b * ln(n_items * pop_i) / ln(n_items) + c + q_i)
//! ```
//!
//! where `q_i` is a hidden per-item quality offset. Latents, categories and
//! qualities are ground truth for diagnostics only; models see content
//! representations (noisy latents), profile features and counts.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::error::{Error, Result};
use crate::seed::{gauss, rng_for};

pub type UserId = u32;
pub type ItemId = u32;
pub type Timestamp = i64;

pub const DAY_SECONDS: Timestamp = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: ItemId,
    pub category: u32,
    pub popularity_weight: f64,
    pub quality: f64,
    pub latent: Vec<f64>,
    pub content_rep: Vec<f64>,
    /// `[ln(1+exposures), ln(1+clicks), smoothed ctr]` over the training split;
    /// empty until [`attach_stats`] runs.
    #[serde(default)]
    pub stats_features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: UserId,
    pub category: u32,
    pub activity_weight: f64,
    pub latent: Vec<f64>,
    pub profile_features: Vec<f64>,
    /// Clicked items in strictly increasing timestamp order.
    pub history: Vec<(ItemId, Timestamp)>,
    #[serde(default)]
    pub stats_features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub timestamp: Timestamp,
    pub label: u8,
}

/// Logistic click model coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClickModel {
    /// Weight on user-item latent affinity.
    pub affinity: f64,
    /// Weight on normalized log popularity.
    pub popularity_bias: f64,
    pub offset: f64,
    /// Standard deviation of the hidden per-item quality offset.
    pub item_quality_sigma: f64,
}

impl Default for ClickModel {
    fn default() -> Self {
        Self {
            affinity: 3.0,
            popularity_bias: 1.0,
            offset: -1.5,
            item_quality_sigma: 0.0,
        }
    }
}

impl ClickModel {
    pub fn coin_flip() -> Self {
        Self {
            affinity: 0.0,
            popularity_bias: 0.0,
            offset: 0.0,
            item_quality_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_events: usize,
    pub num_days: u32,
    pub num_categories: usize,
    pub latent_dim: usize,
    pub profile_dim: usize,
    /// Spread of mixture centers.
    pub center_scale: f64,
    /// Spread of entities around their center.
    pub within_sigma: f64,
    pub item_zipf_s: f64,
    pub user_zipf_s: f64,
    pub noise_sigma: f64,
    pub profile_noise_sigma: f64,
    /// Probability an exposure is drawn from the user's home category.
    pub affinity_mix: f64,
    pub click: ClickModel,
    pub test_days: u32,
    pub user_threshold: u32,
    pub item_threshold: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 5_000,
            num_items: 2_000,
            num_events: 200_000,
            num_days: 10,
            num_categories: 8,
            latent_dim: 16,
            profile_dim: 8,
            center_scale: 1.0,
            within_sigma: 0.5,
            item_zipf_s: 1.4,
            user_zipf_s: 1.0,
            noise_sigma: 0.5,
            profile_noise_sigma: 0.5,
            affinity_mix: 0.5,
            click: ClickModel::default(),
            test_days: 2,
            user_threshold: 5,
            item_threshold: 10,
        }
    }
}

/// Mixture centers shared by items and users.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSpace {
    pub centers: Vec<Vec<f64>>,
    pub within_sigma: f64,
}

impl LatentSpace {
    pub fn new(num_categories: usize, dim: usize, center_scale: f64, within_sigma: f64, seed: u64) -> Result<Self> {
        if num_categories == 0 || dim == 0 {
            return Err(Error::Config("latent space needs >= 1 category and dim >= 1".into()));
        }
        let mut rng = rng_for(seed, "latent-space");
        let centers = (0..num_categories)
            .map(|_| gaussian_vec(&mut rng, dim, center_scale))
            .collect();
        Ok(Self { centers, within_sigma })
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    fn draw<R: Rng>(&self, rng: &mut R, category: usize) -> Vec<f64> {
        self.centers[category]
            .iter()
            .map(|c| c + self.within_sigma * gauss(rng))
            .collect()
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim).map(|_| sigma * gauss(rng)).collect()
}

/// Zipf weights `r^-s` normalized to sum to one, assigned to a random
/// permutation of the entities.
fn zipf_weights<R: Rng>(rng: &mut R, n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut w = vec![0.0; n];
    for (rank, &entity) in order.iter().enumerate() {
        w[entity] = raw[rank] / total;
    }
    w
}

pub fn generate_catalog(space: &LatentSpace, cfg: &SynthConfig, seed: u64) -> Result<Vec<ItemRecord>> {
    if cfg.num_items == 0 || cfg.num_items < space.centers.len() {
        return Err(Error::Config(format!(
            "need num_items >= num_categories >= 1, got {} items and {} categories",
            cfg.num_items,
            space.centers.len()
        )));
    }
    if !(cfg.item_zipf_s > 0.0) || cfg.noise_sigma < 0.0 {
        return Err(Error::Config("item zipf exponent must be > 0 and noise >= 0".into()));
    }
    let mut rng = rng_for(seed, "catalog");
    let pop = zipf_weights(&mut rng, cfg.num_items, cfg.item_zipf_s);
    let k = space.centers.len();
    let items = (0..cfg.num_items)
        .map(|i| {
            let category = rng.random_range(0..k);
            let latent = space.draw(&mut rng, category);
            let content_rep = latent
                .iter()
                .map(|x| x + cfg.noise_sigma * gauss(&mut rng))
                .collect();
            let quality = cfg.click.item_quality_sigma * gauss(&mut rng);
            ItemRecord {
                item_id: i as ItemId,
                category: category as u32,
                popularity_weight: pop[i],
                quality,
                latent,
                content_rep,
                stats_features: Vec::new(),
            }
        })
        .collect();
    Ok(items)
}

pub fn generate_users(space: &LatentSpace, cfg: &SynthConfig, seed: u64) -> Result<Vec<UserRecord>> {
    if cfg.num_users == 0 {
        return Err(Error::Config("num_users must be >= 1".into()));
    }
    if !(cfg.user_zipf_s > 0.0) {
        return Err(Error::Config("user zipf exponent must be > 0".into()));
    }
    let mut rng = rng_for(seed, "users");
    let activity = zipf_weights(&mut rng, cfg.num_users, cfg.user_zipf_s);
    let dim = space.dim();
    let proj: Vec<Vec<f64>> = (0..cfg.profile_dim)
        .map(|_| gaussian_vec(&mut rng, dim, 1.0 / (dim as f64).sqrt()))
        .collect();
    let k = space.centers.len();
    let users = (0..cfg.num_users)
        .map(|u| {
            let category = rng.random_range(0..k);
            let latent = space.draw(&mut rng, category);
            let profile_features = proj
                .iter()
                .map(|row| {
                    crate::autograd::dot(row, &latent)
                        + cfg.profile_noise_sigma * gauss(&mut rng)
                })
                .collect();
            UserRecord {
                user_id: u as UserId,
                category: category as u32,
                activity_weight: activity[u],
                latent,
                profile_features,
                history: Vec::new(),
                stats_features: Vec::new(),
            }
        })
        .collect();
    Ok(users)
}

/// Samples the event stream and appends clicks to user histories.
pub fn generate_interactions(
    catalog: &[ItemRecord],
    users: &mut [UserRecord],
    num_events: usize,
    num_days: u32,
    click: &ClickModel,
    affinity_mix: f64,
    seed: u64,
) -> Result<Vec<InteractionEvent>> {
    if catalog.is_empty() || users.is_empty() {
        return Err(Error::Config("catalog and users must be non-empty".into()));
    }
    if num_events == 0 || num_days == 0 {
        return Err(Error::Config("num_events and num_days must be >= 1".into()));
    }
    let invalid = |e: rand::distr::weighted::Error| Error::Config(format!("invalid weights: {e}"));
    let user_pick = WeightedIndex::new(users.iter().map(|u| u.activity_weight)).map_err(invalid)?;
    let global_pick =
        WeightedIndex::new(catalog.iter().map(|i| i.popularity_weight)).map_err(invalid)?;
    let num_categories = catalog.iter().map(|i| i.category as usize + 1).max().unwrap_or(1);
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); num_categories];
    for (idx, item) in catalog.iter().enumerate() {
        by_category[item.category as usize].push(idx);
    }
    let category_pick: Vec<Option<WeightedIndex<f64>>> = by_category
        .iter()
        .map(|members| WeightedIndex::new(members.iter().map(|&i| catalog[i].popularity_weight)).ok())
        .collect();

    let n = catalog.len() as f64;
    let log_n = n.ln().max(1.0);
    let dim = catalog[0].latent.len().max(1) as f64;
    let span = (num_days as i64 * DAY_SECONDS).max(num_events as i64);
    let mut rng = rng_for(seed, "interactions");
    let mut events = Vec::with_capacity(num_events);
    for k in 0..num_events {
        let timestamp = (k as i128 * span as i128 / num_events as i128) as Timestamp;
        let u = user_pick.sample(&mut rng);
        let user_cat = users[u].category as usize;
        let from_home = rng.random::<f64>() < affinity_mix;
        let i = match (&category_pick.get(user_cat), from_home) {
            (Some(Some(pick)), true) => by_category[user_cat][pick.sample(&mut rng)],
            _ => global_pick.sample(&mut rng),
        };
        let item = &catalog[i];
        let affinity = crate::autograd::dot(&users[u].latent, &item.latent) / dim;
        let pop = (n * item.popularity_weight).ln() / log_n;
        let logit = click.affinity * affinity + click.popularity_bias * pop + click.offset + item.quality;
        let label = u8::from(rng.random::<f64>() < sigmoid(logit));
        if label == 1 {
            users[u].history.push((item.item_id, timestamp));
        }
        events.push(InteractionEvent {
            user_id: users[u].user_id,
            item_id: item.item_id,
            timestamp,
            label,
        });
    }
    Ok(events)
}

/// Splits at the start of day `last_day + 1 - test_days`. Events at or after
/// the boundary go to the test side.
pub fn time_split(
    events: &[InteractionEvent],
    test_days: u32,
) -> Result<(Vec<InteractionEvent>, Vec<InteractionEvent>, Timestamp)> {
    let Some(last) = events.iter().map(|e| e.timestamp).max() else {
        return Err(Error::Split("no events".into()));
    };
    let last_day = last.div_euclid(DAY_SECONDS);
    let boundary = (last_day + 1 - test_days as i64) * DAY_SECONDS;
    let (train, test): (Vec<_>, Vec<_>) = events.iter().partition(|e| e.timestamp < boundary);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split(format!(
            "boundary {boundary} leaves {} train and {} test events",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test, boundary))
}

/// Per-entity activity counts and head/tail flags from training events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityActivity {
    pub exposures: u32,
    pub clicks: u32,
    pub last_seen: Option<Timestamp>,
    pub tail: bool,
    /// `[ln(1+exposures), ln(1+clicks), recency]`, recency being days since
    /// last exposure capped at 7 and scaled to [0, 1] (1 when never seen).
    pub activity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityLabels {
    pub user_threshold: u32,
    pub item_threshold: u32,
    pub reference_time: Timestamp,
    pub users: Vec<EntityActivity>,
    pub items: Vec<EntityActivity>,
}

impl ActivityLabels {
    pub fn user_tail(&self, u: UserId) -> bool {
        self.users[u as usize].tail
    }

    pub fn item_tail(&self, i: ItemId) -> bool {
        self.items[i as usize].tail
    }

    /// A sample is long-tail when its user or its item is tail.
    pub fn long_tail(&self, u: UserId, i: ItemId) -> bool {
        self.user_tail(u) || self.item_tail(i)
    }

    pub fn tail_fractions(&self) -> (f64, f64) {
        let f = |v: &[EntityActivity]| v.iter().filter(|e| e.tail).count() as f64 / v.len().max(1) as f64;
        (f(&self.users), f(&self.items))
    }
}

pub const ACTIVITY_DIM: usize = 3;

fn activity_features(exposures: u32, clicks: u32, last: Option<Timestamp>, reference: Timestamp) -> Vec<f64> {
    let recency = match last {
        Some(t) => ((reference - t) as f64 / DAY_SECONDS as f64).clamp(0.0, 7.0) / 7.0,
        None => 1.0,
    };
    vec![(exposures as f64).ln_1p(), (clicks as f64).ln_1p(), recency]
}

/// Users are tail when their training click count (interactions) is below
/// `user_threshold`; items are tail when their training exposure count is
/// below `item_threshold`.
pub fn label_head_tail(
    train: &[InteractionEvent],
    num_users: usize,
    num_items: usize,
    user_threshold: u32,
    item_threshold: u32,
) -> Result<ActivityLabels> {
    if train.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let reference = train.iter().map(|e| e.timestamp).max().unwrap_or(0);
    let mut ucount = vec![(0u32, 0u32, None::<Timestamp>); num_users];
    let mut icount = vec![(0u32, 0u32, None::<Timestamp>); num_items];
    for e in train {
        let (u, i) = (e.user_id as usize, e.item_id as usize);
        if u >= num_users || i >= num_items {
            return Err(Error::Ingest(format!("event references unknown user {u} or item {i}")));
        }
        for slot in [&mut ucount[u], &mut icount[i]] {
            slot.0 += 1;
            slot.1 += e.label as u32;
            slot.2 = Some(slot.2.map_or(e.timestamp, |t: Timestamp| t.max(e.timestamp)));
        }
    }
    let users = ucount
        .iter()
        .map(|&(exp, clk, last)| EntityActivity {
            exposures: exp,
            clicks: clk,
            last_seen: last,
            tail: clk < user_threshold,
            activity: activity_features(exp, clk, last, reference),
        })
        .collect();
    let items = icount
        .iter()
        .map(|&(exp, clk, last)| EntityActivity {
            exposures: exp,
            clicks: clk,
            last_seen: last,
            tail: exp < item_threshold,
            activity: activity_features(exp, clk, last, reference),
        })
        .collect();
    Ok(ActivityLabels {
        user_threshold,
        item_threshold,
        reference_time: reference,
        users,
        items,
    })
}

pub const STATS_DIM: usize = 3;

fn stats_features(a: &EntityActivity) -> Vec<f64> {
    let ctr = (a.clicks as f64 + 1.0) / (a.exposures as f64 + 4.0);
    vec![(a.exposures as f64).ln_1p(), (a.clicks as f64).ln_1p(), ctr]
}

/// Fills `stats_features` of every item and user from training counts.
pub fn attach_stats(items: &mut [ItemRecord], users: &mut [UserRecord], labels: &ActivityLabels) {
    for it in items.iter_mut() {
        it.stats_features = stats_features(&labels.items[it.item_id as usize]);
    }
    for u in users.iter_mut() {
        u.stats_features = stats_features(&labels.users[u.user_id as usize]);
    }
}

/// Item pairs clicked by one user within `window` consecutive clicks.
/// Keys are normalized so the smaller id comes first.
pub fn extract_cooccurrence(
    events: &[InteractionEvent],
    window: usize,
    min_count: u32,
) -> Result<Vec<(ItemId, ItemId, u32)>> {
    if window == 0 {
        return Err(Error::Config("co-occurrence window must be >= 1".into()));
    }
    let mut seqs: BTreeMap<UserId, Vec<(Timestamp, ItemId)>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.label == 1) {
        seqs.entry(e.user_id).or_default().push((e.timestamp, e.item_id));
    }
    let mut counts: BTreeMap<(ItemId, ItemId), u32> = BTreeMap::new();
    for seq in seqs.values_mut() {
        seq.sort_unstable();
        for a in 0..seq.len() {
            for b in a + 1..seq.len().min(a + window + 1) {
                let (x, y) = (seq[a].1, seq[b].1);
                if x != y {
                    *counts.entry((x.min(y), x.max(y))).or_default() += 1;
                }
            }
        }
    }
    Ok(counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|((a, b), c)| (a, b, c))
        .collect())
}

/// Everything the generator produces for one seed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub items: Vec<ItemRecord>,
    pub users: Vec<UserRecord>,
    pub events: Vec<InteractionEvent>,
    pub split_time: Timestamp,
    pub labels: ActivityLabels,
}

impl Dataset {
    pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        let space = LatentSpace::new(cfg.num_categories, cfg.latent_dim, cfg.center_scale, cfg.within_sigma, seed)?;
        let mut items = generate_catalog(&space, cfg, seed)?;
        let mut users = generate_users(&space, cfg, seed)?;
        let events = generate_interactions(
            &items,
            &mut users,
            cfg.num_events,
            cfg.num_days,
            &cfg.click,
            cfg.affinity_mix,
            seed,
        )?;
        let (train, _, split_time) = time_split(&events, cfg.test_days)?;
        let labels = label_head_tail(&train, users.len(), items.len(), cfg.user_threshold, cfg.item_threshold)?;
        attach_stats(&mut items, &mut users, &labels);
        Ok(Self {
            config: cfg.clone(),
            seed,
            items,
            users,
            events,
            split_time,
            labels,
        })
    }

    pub fn train_events(&self) -> Vec<InteractionEvent> {
        self.events.iter().filter(|e| e.timestamp < self.split_time).copied().collect()
    }

    pub fn test_events(&self) -> Vec<InteractionEvent> {
        self.events.iter().filter(|e| e.timestamp >= self.split_time).copied().collect()
    }

    /// User histories restricted to clicks before `cutoff`.
    pub fn histories_before(&self, cutoff: Timestamp) -> Vec<Vec<(ItemId, Timestamp)>> {
        self.users
            .iter()
            .map(|u| u.history.iter().copied().filter(|&(_, t)| t < cutoff).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_users: 300,
            num_items: 200,
            num_events: 10_000,
            ..SynthConfig::default()
        }
    }

    fn space(cfg: &SynthConfig, seed: u64) -> LatentSpace {
        LatentSpace::new(cfg.num_categories, cfg.latent_dim, cfg.center_scale, cfg.within_sigma, seed).unwrap()
    }

    #[test]
    fn single_item_has_unit_popularity() {
        let cfg = SynthConfig {
            num_items: 1,
            num_categories: 1,
            ..small_cfg()
        };
        let items = generate_catalog(&space(&cfg, 1), &cfg, 1).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].popularity_weight, 1.0);
    }

    #[test]
    fn zero_noise_content_equals_latent() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small_cfg()
        };
        for it in generate_catalog(&space(&cfg, 2), &cfg, 2).unwrap() {
            assert_eq!(it.content_rep, it.latent);
        }
    }

    #[test]
    fn harmonic_head_mass() {
        // Oracle: H_10 / H_1000 by direct summation.
        let h = |n: usize| (1..=n).map(|r| 1.0 / r as f64).sum::<f64>();
        let expected = h(10) / h(1000);
        assert!(expected > 0.25);
        let cfg = SynthConfig {
            num_items: 1000,
            item_zipf_s: 1.0,
            ..small_cfg()
        };
        let items = generate_catalog(&space(&cfg, 3), &cfg, 3).unwrap();
        let mut w: Vec<f64> = items.iter().map(|i| i.popularity_weight).collect();
        w.sort_by(|a, b| b.total_cmp(a));
        let top: f64 = w[..10].iter().sum();
        assert!((top - expected).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let cfg = SynthConfig {
            num_items: 3,
            num_categories: 8,
            ..small_cfg()
        };
        assert!(matches!(generate_catalog(&space(&cfg, 1), &cfg, 1), Err(Error::Config(_))));
        let cfg = SynthConfig {
            num_users: 0,
            ..small_cfg()
        };
        assert!(matches!(generate_users(&space(&cfg, 1), &cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn user_generation_examples() {
        let cfg = SynthConfig {
            num_users: 1,
            ..small_cfg()
        };
        let u = generate_users(&space(&cfg, 1), &cfg, 1).unwrap();
        assert_eq!(u[0].activity_weight, 1.0);

        let cfg = SynthConfig {
            num_users: 100,
            user_zipf_s: 0.01,
            ..small_cfg()
        };
        let u = generate_users(&space(&cfg, 1), &cfg, 1).unwrap();
        let max = u.iter().map(|u| u.activity_weight).fold(0.0, f64::max);
        let min = u.iter().map(|u| u.activity_weight).fold(1.0, f64::min);
        assert!((max / min - 100f64.powf(0.01)).abs() < 1e-12);
        assert!(max / min < 2.0);

        let again = generate_users(&space(&cfg, 1), &cfg, 1).unwrap();
        assert_eq!(u, again);
    }

    #[test]
    fn coin_flip_click_model() {
        let cfg = small_cfg();
        let sp = space(&cfg, 4);
        let items = generate_catalog(&sp, &SynthConfig { click: ClickModel::coin_flip(), ..cfg.clone() }, 4).unwrap();
        let mut users = generate_users(&sp, &cfg, 4).unwrap();
        let ev = generate_interactions(&items, &mut users, 10_000, 10, &ClickModel::coin_flip(), 0.5, 4).unwrap();
        let ctr = ev.iter().map(|e| e.label as f64).sum::<f64>() / ev.len() as f64;
        assert!((ctr - 0.5).abs() < 0.02, "ctr {ctr}");
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
            let mut r = vec![0.0; v.len()];
            let mut i = 0;
            while i < idx.len() {
                let mut j = i;
                while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                    j += 1;
                }
                for k in i..=j {
                    r[idx[k]] = (i + j) as f64 / 2.0;
                }
                i = j + 1;
            }
            r
        }
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn popularity_driven_clicks_track_popularity() {
        let cfg = small_cfg();
        let sp = space(&cfg, 5);
        let click = ClickModel {
            affinity: 0.0,
            popularity_bias: 4.0,
            offset: -2.0,
            item_quality_sigma: 0.0,
        };
        let items = generate_catalog(&sp, &cfg, 5).unwrap();
        let mut users = generate_users(&sp, &cfg, 5).unwrap();
        let ev = generate_interactions(&items, &mut users, 10_000, 10, &click, 0.0, 5).unwrap();
        let mut exp = vec![0.0; items.len()];
        let mut clk = vec![0.0; items.len()];
        for e in &ev {
            exp[e.item_id as usize] += 1.0;
            clk[e.item_id as usize] += e.label as f64;
        }
        let (mut pops, mut ctrs) = (Vec::new(), Vec::new());
        for it in &items {
            let n = exp[it.item_id as usize];
            if n >= 50.0 {
                pops.push(it.popularity_weight);
                ctrs.push(clk[it.item_id as usize] / n);
            }
        }
        assert!(pops.len() > 10, "{}", pops.len());
        let rho = spearman(&pops, &ctrs);
        assert!(rho > 0.8, "spearman {rho}");
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let cfg = small_cfg();
        let a = Dataset::generate(&cfg, 11).unwrap();
        let b = Dataset::generate(&cfg, 11).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.items, b.items);
        for w in a.events.windows(2) {
            assert!(w[0].timestamp < w[1].timestamp);
        }
        for e in &a.events {
            assert!((e.user_id as usize) < a.users.len());
            assert!((e.item_id as usize) < a.items.len());
            assert!(e.label <= 1);
        }
        for u in &a.users {
            for w in u.history.windows(2) {
                assert!(w[0].1 < w[1].1);
            }
        }
        let c = Dataset::generate(&cfg, 12).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn default_corpus_is_heavy_tailed() {
        let d = Dataset::generate(&SynthConfig::default(), 1).unwrap();
        let (user_tail, item_tail) = d.labels.tail_fractions();
        assert!((0.6..=0.99).contains(&item_tail), "item tail {item_tail}");
        assert!(user_tail > 0.3, "user tail {user_tail}");
    }

    fn ev(u: u32, i: u32, t: i64, label: u8) -> InteractionEvent {
        InteractionEvent {
            user_id: u,
            item_id: i,
            timestamp: t,
            label,
        }
    }

    #[test]
    fn head_tail_thresholds() {
        let mut events = Vec::new();
        let mut t = 0;
        // user 0: 4 clicks (tail), user 1: 5 clicks (head)
        for k in 0..4 {
            events.push(ev(0, k % 2, t, 1));
            t += 1;
        }
        for _ in 0..5 {
            events.push(ev(1, 2, t, 1));
            t += 1;
        }
        // item 2 now has 5 exposures; add 5 more non-clicks -> exactly 10
        for _ in 0..5 {
            events.push(ev(1, 2, t, 0));
            t += 1;
        }
        let l = label_head_tail(&events, 2, 3, 5, 10).unwrap();
        assert!(l.user_tail(0));
        assert!(!l.user_tail(1));
        assert!(!l.item_tail(2), "exactly ten exposures is head");
        assert!(l.item_tail(0));
        assert!(!l.long_tail(1, 2));
        assert!(l.long_tail(0, 2));
        assert_eq!(l.users[1].activity[0], 10f64.ln_1p());
        assert!(matches!(label_head_tail(&[], 2, 3, 5, 10), Err(Error::EmptyLabels)));
    }

    #[test]
    fn split_examples() {
        let same_day: Vec<_> = (0..10).map(|t| ev(0, 0, t, 0)).collect();
        assert!(matches!(time_split(&same_day, 0), Err(Error::Split(_))));

        // 10 days, day d has d+1 events; last five days are test.
        let mut events = Vec::new();
        for d in 0..10i64 {
            for k in 0..=d {
                events.push(ev(0, 0, d * DAY_SECONDS + k * 60, 0));
            }
        }
        let (train, test, boundary) = time_split(&events, 5).unwrap();
        let per_day = |d: i64| (d + 1) as usize;
        assert_eq!(train.len(), (0..5).map(per_day).sum::<usize>());
        assert_eq!(test.len(), (5..10).map(per_day).sum::<usize>());
        assert_eq!(train.len() + test.len(), events.len());
        assert_eq!(boundary, 5 * DAY_SECONDS);
        assert!(test.iter().any(|e| e.timestamp == boundary), "boundary event goes to test");
    }

    #[test]
    fn cooccurrence_examples() {
        let p = extract_cooccurrence(&[ev(0, 7, 0, 1), ev(0, 3, 1, 1)], 1, 1).unwrap();
        assert_eq!(p, vec![(3, 7, 1)]);
        assert!(extract_cooccurrence(&[ev(0, 7, 0, 1), ev(0, 3, 1, 1)], 1, 2).unwrap().is_empty());
        let p = extract_cooccurrence(&[ev(0, 1, 0, 1), ev(0, 2, 1, 1), ev(0, 3, 2, 1)], 2, 1).unwrap();
        assert_eq!(p, vec![(1, 2, 1), (1, 3, 1), (2, 3, 1)]);
        let swapped = extract_cooccurrence(&[ev(0, 3, 0, 1), ev(0, 7, 1, 1)], 1, 1).unwrap();
        assert_eq!(swapped, vec![(3, 7, 1)]);
        assert!(extract_cooccurrence(&[], 0, 1).is_err());
    }
}
