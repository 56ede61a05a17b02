//! Synthetic social-recommendation data with a known confounding mechanism.
//!
//! A conformity-times-popularity term drives both which items a user gets
//! exposed to and (optionally) how they rate them, which is exactly what a
//! confounder is. Because the generating process is known, an unbiased test
//! set can be drawn directly from the true rating function, making
//! deconfounding claims checkable at desk scale.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{build_dataset, Dataset, Rating, RatingRecord, SocialEdge, TestSubset};
use crate::derive_seed;
use crate::nncore::sigmoid;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset construction failed: {0}")]
    Data(#[from] crate::dataio::DataError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// Weight of the conformity x popularity term in the exposure logit and
    /// (when `confound_in_rating` is set) in the rating mean.
    pub confound_strength: f64,
    /// Restrict the confounder to the exposure mechanism only; the rating
    /// mean then depends purely on preference-attribute affinity.
    pub confound_in_rating: bool,
    pub exposure_scale: f64,
    /// Approximate fraction of (user, item) pairs exposed; calibrates the
    /// logit offset.
    pub target_density: f64,
    pub social_knn: usize,
    pub rating_noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 500,
            n_items: 800,
            latent_dim: 4,
            confound_strength: 3.0,
            confound_in_rating: true,
            exposure_scale: 1.0,
            target_density: 0.02,
            social_knn: 5,
            rating_noise_sd: 0.5,
            seed: 42,
        }
    }
}

/// The generator's ground truth, re-indexed to the dataset's internal ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOracle {
    pub user_preference: Vec<Vec<f64>>,
    pub item_attribute: Vec<Vec<f64>>,
    pub user_conformity: Vec<f64>,
    pub item_popularity: Vec<f64>,
    pub confound_strength: f64,
    pub confound_in_rating: bool,
    pub rating_noise_sd: f64,
    pub exposure_scale: f64,
    pub exposure_offset: f64,
    pub seed: u64,
    /// Users / items whose exposure had to be forced to keep positivity.
    pub forced_user_exposures: usize,
    pub forced_item_exposures: usize,
}

impl SynthOracle {
    pub fn n_users(&self) -> usize {
        self.user_preference.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_attribute.len()
    }

    fn affinity(&self, user: usize, item: usize) -> f64 {
        self.user_preference[user]
            .iter()
            .zip(&self.item_attribute[item])
            .map(|(p, q)| p * q)
            .sum()
    }

    /// Mean of the true rating function before noise and rounding.
    pub fn rating_mean(&self, user: usize, item: usize) -> f64 {
        let confound = if self.confound_in_rating {
            self.confound_strength * self.user_conformity[user] * self.item_popularity[item]
        } else {
            0.0
        };
        3.0 + self.affinity(user, item) + confound
    }

    /// Draw an observed rating on the 1..5 integer grid.
    pub fn sample_rating(&self, user: usize, item: usize, rng: &mut ChaCha8Rng) -> f64 {
        let noise = Normal::new(0.0, self.rating_noise_sd).unwrap().sample(rng);
        (self.rating_mean(user, item) + noise).round().clamp(1.0, 5.0)
    }

    fn exposure_logit(&self, user: usize, item: usize) -> f64 {
        self.exposure_scale * self.affinity(user, item)
            + self.confound_strength * self.user_conformity[user] * self.item_popularity[item]
            - self.exposure_offset
    }

    pub fn write_json(&self, path: &Path) -> Result<(), SynthError> {
        let file = File::create(path)
            .map_err(|e| SynthError::Io { path: path.display().to_string(), source: e })?;
        serde_json::to_writer(BufWriter::new(file), self).map_err(|e| SynthError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })
    }

    pub fn read_json(path: &Path) -> Result<Self, SynthError> {
        let file = File::open(path)
            .map_err(|e| SynthError::Io { path: path.display().to_string(), source: e })?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| SynthError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })
    }
}

/// Generate a confounded dataset plus its oracle.
///
/// Preferences and attributes are standard normal, conformity is
/// Uniform(0,1), popularity has a Pareto tail normalized into (0, 1].
/// Exposure is Bernoulli of a sigmoid logit combining preference affinity
/// and the confounding term; exposed pairs get a rating from the true rating
/// function. The social graph is a mutual-kNN graph over (preference,
/// conformity) features, so socially linked users really are similar.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, SynthOracle), SynthError> {
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.latent_dim == 0 {
        return Err(SynthError::BadConfig("counts must be positive".to_string()));
    }
    if !(cfg.target_density > 0.0 && cfg.target_density < 1.0) {
        return Err(SynthError::BadConfig(format!(
            "target_density {} outside (0, 1)",
            cfg.target_density
        )));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng_latent = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let prefs: Vec<Vec<f64>> = (0..cfg.n_users)
        .map(|_| (0..cfg.latent_dim).map(|_| normal.sample(&mut rng_latent) * scale).collect())
        .collect();
    let attrs: Vec<Vec<f64>> = (0..cfg.n_items)
        .map(|_| (0..cfg.latent_dim).map(|_| normal.sample(&mut rng_latent)).collect())
        .collect();
    let conformity: Vec<f64> =
        (0..cfg.n_users).map(|_| rng_latent.random_range(0.0..1.0)).collect();

    // Pareto tail via inverse CDF, normalized so max popularity is 1.
    let mut popularity: Vec<f64> = (0..cfg.n_items)
        .map(|_| {
            let u: f64 = rng_latent.random_range(0.0..1.0);
            (1.0 - u).powf(-1.0 / 1.5)
        })
        .collect();
    let max_pop = popularity.iter().cloned().fold(f64::MIN, f64::max);
    popularity.iter_mut().for_each(|s| *s /= max_pop);

    let mut oracle = SynthOracle {
        user_preference: prefs,
        item_attribute: attrs,
        user_conformity: conformity,
        item_popularity: popularity,
        confound_strength: cfg.confound_strength,
        confound_in_rating: cfg.confound_in_rating,
        rating_noise_sd: cfg.rating_noise_sd,
        exposure_scale: cfg.exposure_scale,
        exposure_offset: 0.0,
        seed: cfg.seed,
        forced_user_exposures: 0,
        forced_item_exposures: 0,
    };

    // Calibrate the offset so the expected exposure count matches the
    // target density. The sigmoid's tails contribute mass well below any
    // cutoff, so a plain quantile badly overshoots; bisect on the expected
    // count instead (monotone in the offset).
    let mut logits = Vec::with_capacity(cfg.n_users * cfg.n_items);
    for u in 0..cfg.n_users {
        for i in 0..cfg.n_items {
            logits.push(oracle.exposure_logit(u, i));
        }
    }
    let target = cfg.target_density * logits.len() as f64;
    let expected_count =
        |offset: f64| logits.iter().map(|&l| sigmoid(l - offset)).sum::<f64>();
    let mut lo = logits.iter().cloned().fold(f64::MAX, f64::min) - 20.0;
    let mut hi = logits.iter().cloned().fold(f64::MIN, f64::max) + 20.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if expected_count(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    oracle.exposure_offset = 0.5 * (lo + hi);

    // Sample exposures.
    let mut rng_exp = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut exposed: Vec<Vec<u32>> = vec![Vec::new(); cfg.n_users];
    let mut item_counts = vec![0usize; cfg.n_items];
    for (u, user_items) in exposed.iter_mut().enumerate() {
        for i in 0..cfg.n_items {
            if rng_exp.random_range(0.0..1.0) < sigmoid(oracle.exposure_logit(u, i)) {
                user_items.push(i as u32);
                item_counts[i] += 1;
            }
        }
    }

    // Positivity: every user and every item must appear at least once, or
    // downstream id maps would silently drop them. Force the highest-logit
    // missing pair.
    for (u, user_items) in exposed.iter_mut().enumerate() {
        if user_items.is_empty() {
            let best = (0..cfg.n_items)
                .max_by(|&a, &b| {
                    oracle
                        .exposure_logit(u, a)
                        .partial_cmp(&oracle.exposure_logit(u, b))
                        .unwrap()
                })
                .unwrap();
            user_items.push(best as u32);
            item_counts[best] += 1;
            oracle.forced_user_exposures += 1;
        }
    }
    for i in 0..cfg.n_items {
        if item_counts[i] == 0 {
            let best = (0..cfg.n_users)
                .max_by(|&a, &b| {
                    oracle
                        .exposure_logit(a, i)
                        .partial_cmp(&oracle.exposure_logit(b, i))
                        .unwrap()
                })
                .unwrap();
            exposed[best].push(i as u32);
            exposed[best].sort_unstable();
            item_counts[i] += 1;
            oracle.forced_item_exposures += 1;
        }
    }

    // Observed ratings for exposed pairs.
    let mut rng_rating = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let mut records = Vec::new();
    for (u, user_items) in exposed.iter().enumerate() {
        for &i in user_items {
            records.push(RatingRecord {
                user_id: format!("u{u}"),
                item_id: format!("i{i}"),
                rating: oracle.sample_rating(u, i as usize, &mut rng_rating),
            });
        }
    }

    // Mutual-kNN social graph over (preference, conformity) features.
    let features: Vec<Vec<f64>> = (0..cfg.n_users)
        .map(|u| {
            let mut f = oracle.user_preference[u].clone();
            f.push(oracle.user_conformity[u]);
            f
        })
        .collect();
    let knn: Vec<Vec<usize>> = (0..cfg.n_users)
        .map(|u| {
            let mut dists: Vec<(f64, usize)> = (0..cfg.n_users)
                .filter(|&v| v != u)
                .map(|v| {
                    let d: f64 = features[u]
                        .iter()
                        .zip(&features[v])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, v)
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists.into_iter().take(cfg.social_knn).map(|(_, v)| v).collect()
        })
        .collect();
    let mut edges = Vec::new();
    for u in 0..cfg.n_users {
        for &v in &knn[u] {
            if v > u && knn[v].contains(&u) {
                edges.push(SocialEdge { truster: format!("u{u}"), trustee: format!("u{v}") });
            }
        }
    }

    let ds = build_dataset(&records, &edges)?;

    // Re-index the oracle arrays into the dataset's internal id space so
    // downstream consumers can index them directly.
    let mut user_perm = vec![0usize; cfg.n_users];
    for g in 0..cfg.n_users {
        user_perm[ds.user_index[&format!("u{g}")] as usize] = g;
    }
    let mut item_perm = vec![0usize; cfg.n_items];
    for g in 0..cfg.n_items {
        item_perm[ds.item_index[&format!("i{g}")] as usize] = g;
    }
    oracle.user_preference =
        user_perm.iter().map(|&g| oracle.user_preference[g].clone()).collect();
    oracle.user_conformity = user_perm.iter().map(|&g| oracle.user_conformity[g]).collect();
    oracle.item_attribute =
        item_perm.iter().map(|&g| oracle.item_attribute[g].clone()).collect();
    oracle.item_popularity = item_perm.iter().map(|&g| oracle.item_popularity[g]).collect();

    Ok((ds, oracle))
}

/// Unbiased test set: every item appears exactly `n_per_item` times with
/// uniformly sampled users, and ratings come straight from the true rating
/// function. The exposure mechanism plays no part.
pub fn unbiased_testset(oracle: &SynthOracle, n_per_item: usize, seed: u64) -> TestSubset {
    assert!(n_per_item >= 1, "n_per_item must be >= 1");
    let n_users = oracle.n_users();
    let mut rows = Vec::with_capacity(oracle.n_items() * n_per_item);
    for item in 0..oracle.n_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, item as u64));
        let mut pool: Vec<usize> = (0..n_users).collect();
        let take = n_per_item.min(n_users);
        for k in 0..take {
            let j = rng.random_range(k..pool.len());
            pool.swap(k, j);
        }
        for &user in pool.iter().take(take) {
            rows.push(Rating {
                user: user as u32,
                item: item as u32,
                value: oracle.sample_rating(user, item, &mut rng),
            });
        }
    }
    TestSubset { n_per_item, rows }
}

/// Pearson correlation between two equal-length samples.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::validate_subset;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_users: 60,
            n_items: 80,
            target_density: 0.06,
            social_knn: 4,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let (ds1, o1) = generate(&cfg).unwrap();
        let (ds2, o2) = generate(&cfg).unwrap();
        assert_eq!(ds1.ratings, ds2.ratings);
        assert_eq!(o1.item_popularity, o2.item_popularity);
        assert_eq!(ds1.social_adj, ds2.social_adj);
    }

    #[test]
    fn dataset_satisfies_dataio_invariants() {
        let (ds, _) = generate(&small_cfg()).unwrap();
        assert_eq!(ds.n_users, 60);
        assert_eq!(ds.n_items, 80);
        for adj in &ds.social_adj {
            assert!(!adj.is_empty(), "social positivity violated");
        }
        assert!(ds.items_without_ratings().is_empty());
        for r in &ds.ratings {
            assert!((1.0..=5.0).contains(&r.value));
            assert!(r.value.fract() == 0.0, "ratings sit on the integer grid");
        }
    }

    #[test]
    fn every_user_has_an_exposure() {
        let (ds, _) = generate(&small_cfg()).unwrap();
        let mut user_counts = vec![0usize; ds.n_users];
        for r in &ds.ratings {
            user_counts[r.user as usize] += 1;
        }
        assert!(user_counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn oracle_reindexing_matches_dataset_ids() {
        let cfg = small_cfg();
        let (ds, oracle) = generate(&cfg).unwrap();
        // Regenerate raw latents in generation order and compare through the
        // id maps.
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
        let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
        let raw_prefs: Vec<Vec<f64>> = (0..cfg.n_users)
            .map(|_| (0..cfg.latent_dim).map(|_| normal.sample(&mut rng) * scale).collect())
            .collect();
        for g in 0..cfg.n_users {
            let internal = ds.user_index[&format!("u{g}")] as usize;
            assert_eq!(oracle.user_preference[internal], raw_prefs[g]);
        }
    }

    #[test]
    fn confounding_raises_popularity_exposure_correlation() {
        let cfg = SynthConfig {
            n_users: 400,
            n_items: 500,
            confound_strength: 3.0,
            target_density: 0.05,
            seed: 11,
            ..SynthConfig::default()
        };
        let (ds, oracle) = generate(&cfg).unwrap();
        let mut counts = vec![0.0; ds.n_items];
        for r in &ds.ratings {
            counts[r.item as usize] += 1.0;
        }
        let r = correlation(&oracle.item_popularity, &counts);
        assert!(r > 0.3, "popularity-exposure correlation {r}");
    }

    #[test]
    fn no_confounding_leaves_ratings_unbiased() {
        // With confound_strength = 0 the observed mean rating of an item
        // should not track its popularity.
        let cfg = SynthConfig {
            n_users: 400,
            n_items: 500,
            confound_strength: 0.0,
            target_density: 0.05,
            seed: 13,
            ..SynthConfig::default()
        };
        let (ds, oracle) = generate(&cfg).unwrap();
        let mut sums = vec![0.0; ds.n_items];
        let mut counts = vec![0.0; ds.n_items];
        for r in &ds.ratings {
            sums[r.item as usize] += r.value;
            counts[r.item as usize] += 1.0;
        }
        let mut pops = Vec::new();
        let mut means = Vec::new();
        for i in 0..ds.n_items {
            if counts[i] > 0.0 {
                pops.push(oracle.item_popularity[i]);
                means.push(sums[i] / counts[i]);
            }
        }
        let r = correlation(&pops, &means);
        assert!(r.abs() < 0.1, "popularity-rating correlation {r} without confounding");
    }

    #[test]
    fn unbiased_testset_has_exact_counts() {
        let (_, oracle) = generate(&small_cfg()).unwrap();
        let subset = unbiased_testset(&oracle, 3, 5);
        assert_eq!(subset.rows.len(), oracle.n_items() * 3);
        validate_subset(&subset).unwrap();
        // Item-count histogram is a single spike at n_per_item.
        let mut counts = vec![0usize; oracle.n_items()];
        for r in &subset.rows {
            counts[r.item as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 3));
    }

    #[test]
    fn exposure_only_confounding_keeps_test_ratings_flat() {
        // Confounder in the exposure channel only: unbiased test means of
        // popular and unpopular items agree.
        let cfg = SynthConfig {
            n_users: 300,
            n_items: 400,
            confound_strength: 3.0,
            confound_in_rating: false,
            target_density: 0.04,
            seed: 17,
            ..SynthConfig::default()
        };
        let (_, oracle) = generate(&cfg).unwrap();
        let subset = unbiased_testset(&oracle, 10, 23);
        let median_pop = {
            let mut p = oracle.item_popularity.clone();
            p.sort_by(|a, b| a.partial_cmp(b).unwrap());
            p[p.len() / 2]
        };
        let mut hi = Vec::new();
        let mut lo = Vec::new();
        for r in &subset.rows {
            if oracle.item_popularity[r.item as usize] >= median_pop {
                hi.push(r.value);
            } else {
                lo.push(r.value);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let gap = (mean(&hi) - mean(&lo)).abs();
        assert!(gap < 0.1, "unbiased-mean gap {gap}");
    }

    #[test]
    fn oracle_json_round_trip() {
        let (_, oracle) = generate(&small_cfg()).unwrap();
        let dir = std::env::temp_dir().join("d2rec-synth-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("oracle.json");
        oracle.write_json(&path).unwrap();
        let back = SynthOracle::read_json(&path).unwrap();
        assert_eq!(back.item_popularity, oracle.item_popularity);
        assert_eq!(back.exposure_offset, oracle.exposure_offset);
    }
}
